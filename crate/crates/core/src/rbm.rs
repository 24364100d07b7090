//! RBM hashing layer.
//!
//! A binary RBM with logistic conditionals in both directions, trained with
//! contrastive divergence on real-valued descriptors (mean-field visible
//! reconstructions) plus a batch-level cross-entropy regularizer
//!
//! ```text
//! h(B) = sum_alpha sum_j t_ja log z_ja + (1 - t_ja) log(1 - z_ja)
//! ```
//!
//! that pulls hidden activations towards i.i.d. U(0,1) targets. Maximizing
//! `log-likelihood + lambda * h(B)` spreads activation evenly within each
//! hash and across the same bit of different hashes. Hashes are the hidden
//! units binarized at 0.5.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Open01};

use crate::binary::BinaryHash;
use crate::container::{put_f64s, put_u32, write_atomic, ByteReader, Metadata};
use crate::descriptor::Descriptor;
use crate::error::{NipError, Result};
use crate::seed::{stream_rng, STREAM_RBM_INIT, STREAM_RBM_TRAIN};

pub const RBM_MAGIC: &[u8; 4] = b"NIPR";
pub const RBM_VERSION: u32 = 1;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const INIT_WEIGHT_SCALE: f64 = 0.01;
/// Largest visible/hidden layer the enumeration oracle accepts.
pub const ORACLE_MAX_UNITS: usize = 12;

/// Logistic function, kept strictly inside (0, 1).
pub fn sigmoid(u: f64) -> f64 {
    let s = if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbmParams {
    /// hidden x visible
    pub weights: DMatrix<f64>,
    pub hidden_bias: DVector<f64>,
    pub visible_bias: DVector<f64>,
}

impl RbmParams {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            weights: DMatrix::zeros(n_hidden, n_visible),
            hidden_bias: DVector::zeros(n_hidden),
            visible_bias: DVector::zeros(n_visible),
        }
    }

    pub fn n_visible(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.hidden_bias.iter())
            .chain(self.visible_bias.iter())
            .all(|v| v.is_finite())
    }

    pub fn to_bytes(&self, metadata: &Metadata) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(RBM_MAGIC);
        put_u32(&mut out, RBM_VERSION);
        put_u32(&mut out, self.n_visible() as u32);
        put_u32(&mut out, self.n_hidden() as u32);
        put_f64s(&mut out, self.visible_bias.as_slice());
        put_f64s(&mut out, self.hidden_bias.as_slice());
        for j in 0..self.n_hidden() {
            for i in 0..self.n_visible() {
                put_f64s(&mut out, &[self.weights[(j, i)]]);
            }
        }
        metadata.write_trailer(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Metadata)> {
        let mut r = ByteReader::new(bytes);
        r.magic(RBM_MAGIC)?;
        let version = r.u32()?;
        if version != RBM_VERSION {
            return Err(NipError::CorruptStore(format!(
                "unsupported RBM model version {version}"
            )));
        }
        let n_visible = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if n_visible == 0 || n_hidden == 0 {
            return Err(NipError::CorruptStore("RBM with an empty layer".into()));
        }
        let visible_bias = DVector::from_vec(r.f64_vec(n_visible)?);
        let hidden_bias = DVector::from_vec(r.f64_vec(n_hidden)?);
        let weights =
            DMatrix::from_row_slice(n_hidden, n_visible, &r.f64_vec(n_hidden * n_visible)?);
        let meta = Metadata::read_trailer(r.rest())?;
        Ok((
            Self {
                weights,
                hidden_bias,
                visible_bias,
            },
            meta,
        ))
    }

    pub fn write(&self, path: impl AsRef<Path>, metadata: &Metadata) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes(metadata)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, Metadata)> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Small zero-mean Gaussian weights, zero biases; deterministic in `seed`.
pub fn init_rbm(n_visible: usize, n_hidden: usize, seed: u64) -> RbmParams {
    let mut rng = stream_rng(seed, STREAM_RBM_INIT);
    let normal = Normal::new(0.0, INIT_WEIGHT_SCALE).expect("valid normal");
    let mut p = RbmParams::zeros(n_visible, n_hidden);
    for j in 0..n_hidden {
        for i in 0..n_visible {
            p.weights[(j, i)] = normal.sample(&mut rng);
        }
    }
    p
}

/// P(z_j = 1 | x) for every hidden unit.
pub fn hidden_probs(p: &RbmParams, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), p.n_visible(), "visible vector length");
    (0..p.n_hidden())
        .map(|j| {
            sigmoid(
                p.weights
                    .row(j)
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + p.hidden_bias[j],
            )
        })
        .collect()
}

/// P(x_i = 1 | z) for every visible unit.
pub fn visible_probs(p: &RbmParams, z: &[f64]) -> Vec<f64> {
    assert_eq!(z.len(), p.n_hidden(), "hidden vector length");
    (0..p.n_visible())
        .map(|i| {
            sigmoid(
                p.weights
                    .column(i)
                    .iter()
                    .zip(z)
                    .map(|(w, h)| w * h)
                    .sum::<f64>()
                    + p.visible_bias[i],
            )
        })
        .collect()
}

/// Hidden probabilities for a batch (rows are samples): batch x J.
fn hidden_probs_batch(p: &RbmParams, batch: &DMatrix<f64>) -> DMatrix<f64> {
    let mut pre = batch * p.weights.transpose();
    for mut row in pre.row_iter_mut() {
        row += p.hidden_bias.transpose();
    }
    pre.map(sigmoid)
}

/// Visible probabilities for a batch of hidden states: batch x I.
fn visible_probs_batch(p: &RbmParams, hidden: &DMatrix<f64>) -> DMatrix<f64> {
    let mut pre = hidden * &p.weights;
    for mut row in pre.row_iter_mut() {
        row += p.visible_bias.transpose();
    }
    pre.map(sigmoid)
}

fn bernoulli(probs: &DMatrix<f64>, rng: &mut impl Rng) -> DMatrix<f64> {
    // row-major draw order keeps results independent of storage layout
    let (r, c) = probs.shape();
    let mut out = DMatrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            out[(i, j)] = if rng.random::<f64>() < probs[(i, j)] {
                1.0
            } else {
                0.0
            };
        }
    }
    out
}

/// Per-sample target activations, batch x J, entries in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix(pub DMatrix<f64>);

impl TargetMatrix {
    pub fn new(t: DMatrix<f64>) -> Result<Self> {
        if t.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(NipError::Domain(
                "target activations must lie strictly inside (0, 1)".into(),
            ));
        }
        Ok(Self(t))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// I.i.d. U(0,1) targets: every row and every column is uniformly distributed.
pub fn sample_targets(batch_size: usize, n_hidden: usize, rng: &mut impl Rng) -> TargetMatrix {
    let mut t = DMatrix::zeros(batch_size, n_hidden);
    for a in 0..batch_size {
        for j in 0..n_hidden {
            t[(a, j)] = Open01.sample(rng);
        }
    }
    TargetMatrix(t)
}

/// Batch cross-entropy between hidden probabilities and targets; larger is
/// better, maximal at `z == t`.
pub fn regularizer(z_probs: &DMatrix<f64>, t: &TargetMatrix) -> f64 {
    assert_eq!(z_probs.shape(), t.0.shape(), "regularizer shapes");
    z_probs
        .iter()
        .zip(t.0.iter())
        .map(|(&z, &t)| {
            let z = z.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            t * z.ln() + (1.0 - t) * (1.0 - z).ln()
        })
        .sum()
}

/// h(B) evaluated at the hidden probabilities the parameters give `batch`.
pub fn regularizer_objective(p: &RbmParams, batch: &DMatrix<f64>, t: &TargetMatrix) -> f64 {
    regularizer(&hidden_probs_batch(p, batch), t)
}

/// Gradient of `regularizer_objective` with respect to (W, b):
/// `dh/dW_j = sum_a (t_ja - z_ja) x_a`, `dh/db_j = sum_a (t_ja - z_ja)`.
pub fn regularizer_grad(
    p: &RbmParams,
    batch: &DMatrix<f64>,
    t: &TargetMatrix,
) -> (DMatrix<f64>, DVector<f64>) {
    let z = hidden_probs_batch(p, batch);
    regularizer_grad_from(&z, batch, t)
}

fn regularizer_grad_from(
    z: &DMatrix<f64>,
    batch: &DMatrix<f64>,
    t: &TargetMatrix,
) -> (DMatrix<f64>, DVector<f64>) {
    let diff = &t.0 - z;
    let dw = diff.transpose() * batch;
    let db = diff.row_sum().transpose();
    (dw, db)
}

/// Parameter-shaped gradient (or update) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: DMatrix<f64>,
    pub hidden_bias: DVector<f64>,
    pub visible_bias: DVector<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &RbmParams) -> Self {
        Self {
            weights: DMatrix::zeros(p.n_hidden(), p.n_visible()),
            hidden_bias: DVector::zeros(p.n_hidden()),
            visible_bias: DVector::zeros(p.n_visible()),
        }
    }

    /// All components as one flat vector (W row-major, then b, then c).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(
            self.weights.len() + self.hidden_bias.len() + self.visible_bias.len(),
        );
        for j in 0..self.weights.nrows() {
            out.extend(self.weights.row(j).iter());
        }
        out.extend(self.hidden_bias.iter());
        out.extend(self.visible_bias.iter());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub cd_k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the batch regularizer; 0 gives a plain CD-trained RBM.
    pub lambda: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            cd_k: 1,
            batch_size: 100,
            epochs: 30,
            lambda: 0.1,
            momentum: 0.5,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NipError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.cd_k == 0 {
            return bad("cd_k must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.lambda > 0.0 && self.batch_size < 2 {
            return bad("the batch regularizer needs batch_size >= 2".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }

    pub fn to_metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.set("learning_rate", self.learning_rate)
            .set("cd_k", self.cd_k)
            .set("batch_size", self.batch_size)
            .set("epochs", self.epochs)
            .set("lambda", self.lambda)
            .set("momentum", self.momentum)
            .set("weight_decay", self.weight_decay)
            .set("seed", self.seed);
        m
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_metadata().to_text().trim_end())
    }
}

/// Statistics of one CD step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub batch_size: usize,
    /// Mean squared difference between data and its mean-field reconstruction.
    pub reconstruction_error: f64,
    /// h(B) at the data hidden probabilities, before the update.
    pub regularizer: f64,
    /// Per-bit mean of the data hidden probabilities.
    pub bit_means: Vec<f64>,
}

/// Result of the CD-k Gibbs chain for one batch, averaged over the batch.
pub struct CdEstimate {
    pub gradients: Gradients,
    pub data_hidden: DMatrix<f64>,
    pub reconstruction_error: f64,
}

/// CD-k estimate of the mean log-likelihood gradient. Hidden states are
/// Bernoulli samples; visible states are mean-field probabilities.
pub fn cd_gradient(
    p: &RbmParams,
    batch: &DMatrix<f64>,
    k: usize,
    rng: &mut impl Rng,
) -> CdEstimate {
    let n = batch.nrows() as f64;
    let pos_h = hidden_probs_batch(p, batch);
    let mut h_state = bernoulli(&pos_h, rng);
    let mut neg_v = visible_probs_batch(p, &h_state);
    let mut neg_h = hidden_probs_batch(p, &neg_v);
    for _ in 1..k.max(1) {
        h_state = bernoulli(&neg_h, rng);
        neg_v = visible_probs_batch(p, &h_state);
        neg_h = hidden_probs_batch(p, &neg_v);
    }
    let weights = (pos_h.transpose() * batch - neg_h.transpose() * &neg_v) / n;
    let hidden_bias = (pos_h.row_sum() - neg_h.row_sum()).transpose() / n;
    let visible_bias = (batch.row_sum() - neg_v.row_sum()).transpose() / n;
    let reconstruction_error = (batch - &neg_v).norm_squared() / (batch.len().max(1) as f64);
    CdEstimate {
        gradients: Gradients {
            weights,
            hidden_bias,
            visible_bias,
        },
        data_hidden: pos_h,
        reconstruction_error,
    }
}

/// Parameters plus momentum state for single-writer training.
#[derive(Debug, Clone)]
pub struct RbmTrainer {
    pub params: RbmParams,
    velocity: Gradients,
    cfg: TrainConfig,
}

impl RbmTrainer {
    pub fn new(params: RbmParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = Gradients::zeros_like(&params);
        Ok(Self {
            params,
            velocity,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One momentum step on `likelihood + lambda * h(B)`:
    ///
    /// `dW = lr * [(<zx>_data - <zx>_recon) / n + lambda * dh/dW / n - decay * W]`
    ///
    /// with the analogous bias updates (no decay, no regularizer on `c`).
    pub fn cd_update(&mut self, batch: &DMatrix<f64>, rng: &mut impl Rng) -> Result<BatchStats> {
        if batch.ncols() != self.params.n_visible() {
            return Err(NipError::Dim(format!(
                "batch has {} columns, RBM has {} visible units",
                batch.ncols(),
                self.params.n_visible()
            )));
        }
        if batch.nrows() == 0 {
            return Err(NipError::Dim("empty batch".into()));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(NipError::Validation(
                "batch contains non-finite values".into(),
            ));
        }
        let n = batch.nrows() as f64;
        let cfg = &self.cfg;
        let targets = sample_targets(batch.nrows(), self.params.n_hidden(), rng);
        let est = cd_gradient(&self.params, batch, cfg.cd_k, rng);
        let (reg_w, reg_b) = regularizer_grad_from(&est.data_hidden, batch, &targets);
        let reg_value = regularizer(&est.data_hidden, &targets);

        let g = &est.gradients;
        let dw = (&g.weights + &reg_w * (cfg.lambda / n) - &self.params.weights * cfg.weight_decay)
            * cfg.learning_rate;
        let db = (&g.hidden_bias + &reg_b * (cfg.lambda / n)) * cfg.learning_rate;
        let dc = &g.visible_bias * cfg.learning_rate;

        let v = &mut self.velocity;
        v.weights = &v.weights * cfg.momentum + dw;
        v.hidden_bias = &v.hidden_bias * cfg.momentum + db;
        v.visible_bias = &v.visible_bias * cfg.momentum + dc;

        let mut next = self.params.clone();
        next.weights += &v.weights;
        next.hidden_bias += &v.hidden_bias;
        next.visible_bias += &v.visible_bias;
        if !next.is_finite() {
            return Err(NipError::NumericalDivergence(
                "RBM parameters became non-finite; lower the learning rate".into(),
            ));
        }
        self.params = next;

        let bit_means = (est.data_hidden.row_sum() / n).iter().copied().collect();
        Ok(BatchStats {
            batch_size: batch.nrows(),
            reconstruction_error: est.reconstruction_error,
            regularizer: reg_value,
            bit_means,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub reconstruction_error: f64,
    /// h(B) averaged over the epoch's batches.
    pub regularizer: f64,
    pub bit_means: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Runs `cfg.epochs` passes of shuffled mini-batch CD over the rows of `dataset`.
pub fn train(
    p: RbmParams,
    dataset: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<(RbmParams, TrainHistory)> {
    cfg.validate()?;
    let n = dataset.nrows();
    if dataset.ncols() != p.n_visible() {
        return Err(NipError::Dim(format!(
            "dataset has {} columns, RBM has {} visible units",
            dataset.ncols(),
            p.n_visible()
        )));
    }
    if n < cfg.batch_size {
        return Err(NipError::Config(format!(
            "dataset has {n} rows, fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    let mut rng = stream_rng(cfg.seed, STREAM_RBM_TRAIN);
    let mut trainer = RbmTrainer::new(p, cfg.clone())?;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut recon = 0.0;
        let mut reg = 0.0;
        let mut batches = 0usize;
        let mut bit_sums = vec![0.0; trainer.params.n_hidden()];
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.select_rows(chunk.iter());
            let stats = trainer.cd_update(&batch, &mut rng)?;
            recon += stats.reconstruction_error * stats.batch_size as f64;
            reg += stats.regularizer;
            batches += 1;
            for (s, m) in bit_sums.iter_mut().zip(&stats.bit_means) {
                *s += m * stats.batch_size as f64;
            }
        }
        history.epochs.push(EpochStats {
            reconstruction_error: recon / n as f64,
            regularizer: reg / batches as f64,
            bit_means: bit_sums.into_iter().map(|s| s / n as f64).collect(),
        });
    }
    Ok((trainer.params, history))
}

/// Bit `j` is set iff `P(z_j | d) > 0.5`, i.e. iff `W_j . d + b_j > 0`.
pub fn hash(p: &RbmParams, d: &Descriptor) -> Result<BinaryHash> {
    if d.dim() != p.n_visible() {
        return Err(NipError::Dim(format!(
            "RBM expects {} inputs, descriptor has {}",
            p.n_visible(),
            d.dim()
        )));
    }
    Ok(BinaryHash::from_bits(
        d.image_id.clone(),
        (0..p.n_hidden()).map(|j| {
            p.weights
                .row(j)
                .iter()
                .zip(&d.values)
                .map(|(w, x)| w * x)
                .sum::<f64>()
                + p.hidden_bias[j]
                > 0.0
        }),
    ))
}

fn check_oracle_size(p: &RbmParams) -> Result<()> {
    if p.n_visible() > ORACLE_MAX_UNITS || p.n_hidden() > ORACLE_MAX_UNITS {
        return Err(NipError::OracleTooLarge(format!(
            "{}x{} RBM; enumeration is limited to {ORACLE_MAX_UNITS} units per layer",
            p.n_visible(),
            p.n_hidden()
        )));
    }
    Ok(())
}

fn bits_of(state: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((state >> i) & 1) as f64).collect()
}

/// `-E(v, z) = c.v + b.z + z^T W v`
fn neg_energy(p: &RbmParams, v: &[f64], z: &[f64]) -> f64 {
    let mut e: f64 = p.visible_bias.iter().zip(v).map(|(c, x)| c * x).sum();
    e += p.hidden_bias.iter().zip(z).map(|(b, h)| b * h).sum::<f64>();
    for (j, zj) in z.iter().enumerate() {
        if *zj != 0.0 {
            e += zj
                * p.weights
                    .row(j)
                    .iter()
                    .zip(v)
                    .map(|(w, x)| w * x)
                    .sum::<f64>();
        }
    }
    e
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `sum_alpha log P(x_alpha)` by enumerating every visible and hidden state.
pub fn exact_log_likelihood(p: &RbmParams, batch: &DMatrix<f64>) -> Result<f64> {
    check_oracle_size(p)?;
    let (ni, nj) = (p.n_visible(), p.n_hidden());
    let hidden: Vec<Vec<f64>> = (0..1usize << nj).map(|s| bits_of(s, nj)).collect();
    let mut joint = Vec::with_capacity((1 << ni) * hidden.len());
    for vs in 0..1usize << ni {
        let v = bits_of(vs, ni);
        joint.extend(hidden.iter().map(|z| neg_energy(p, &v, z)));
    }
    let log_z = log_sum_exp(&joint);
    let mut total = 0.0;
    for row in batch.row_iter() {
        let x: Vec<f64> = row.iter().copied().collect();
        let terms: Vec<f64> = hidden.iter().map(|z| neg_energy(p, &x, z)).collect();
        total += log_sum_exp(&terms) - log_z;
    }
    Ok(total)
}

/// Exact gradient of [`exact_log_likelihood`], also by full enumeration:
/// data expectations of `z v^T`, `z`, `v` under `P(z | x)` minus model
/// expectations under `P(v, z)`.
pub fn exact_ll_grad(p: &RbmParams, batch: &DMatrix<f64>) -> Result<Gradients> {
    check_oracle_size(p)?;
    let (ni, nj) = (p.n_visible(), p.n_hidden());
    if batch.ncols() != ni {
        return Err(NipError::Dim(format!(
            "batch has {} columns, RBM has {ni} visible units",
            batch.ncols()
        )));
    }
    let hidden: Vec<Vec<f64>> = (0..1usize << nj).map(|s| bits_of(s, nj)).collect();

    // expectation of the sufficient statistics under weights exp(-E)
    let expect = |pairs: &[(Vec<f64>, &Vec<f64>)]| -> Gradients {
        let logw: Vec<f64> = pairs.iter().map(|(v, z)| neg_energy(p, v, z)).collect();
        let lse = log_sum_exp(&logw);
        let mut g = Gradients::zeros_like(p);
        for ((v, z), lw) in pairs.iter().zip(&logw) {
            let w = (lw - lse).exp();
            for j in 0..nj {
                if z[j] != 0.0 {
                    g.hidden_bias[j] += w * z[j];
                    for (i, vi) in v.iter().enumerate() {
                        g.weights[(j, i)] += w * z[j] * vi;
                    }
                }
            }
            for (c, vi) in g.visible_bias.iter_mut().zip(v) {
                *c += w * vi;
            }
        }
        g
    };

    let model_pairs: Vec<(Vec<f64>, &Vec<f64>)> = (0..1usize << ni)
        .flat_map(|vs| {
            let v = bits_of(vs, ni);
            hidden.iter().map(move |z| (v.clone(), z))
        })
        .collect();
    let model = expect(&model_pairs);

    let mut grad = Gradients::zeros_like(p);
    for row in batch.row_iter() {
        let x: Vec<f64> = row.iter().copied().collect();
        let pairs: Vec<(Vec<f64>, &Vec<f64>)> = hidden.iter().map(|z| (x.clone(), z)).collect();
        let data = expect(&pairs);
        grad.weights += data.weights - &model.weights;
        grad.hidden_bias += data.hidden_bias - &model.hidden_bias;
        grad.visible_bias += data.visible_bias - &model.visible_bias;
    }
    Ok(grad)
}
