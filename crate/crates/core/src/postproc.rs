//! Descriptor post-processing: L2 normalization, PCA (optionally whitened)
//! and direct threshold binarization.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::binary::BinaryHash;
use crate::container::{put_f64s, put_u32, write_atomic, ByteReader, Metadata};
use crate::descriptor::Descriptor;
use crate::error::{NipError, Result};

pub const PCA_MAGIC: &[u8; 4] = b"NIPP";
pub const PCA_VERSION: u32 = 1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

pub fn l2_normalize_values(values: &[f64]) -> Vec<f64> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return values.to_vec();
    }
    values.iter().map(|v| v / norm).collect()
}

pub fn l2_normalize(d: &Descriptor) -> Descriptor {
    Descriptor {
        image_id: d.image_id.clone(),
        provenance: d.provenance.clone(),
        values: l2_normalize_values(&d.values),
    }
}

/// Stacks equal-length rows into an N x D matrix.
pub fn stack_rows(rows: &[&[f64]]) -> Result<DMatrix<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| NipError::Dim("no rows".into()))?;
    let d = first.len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(NipError::Dim(format!(
            "row of length {} among rows of length {d}",
            r.len()
        )));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        d,
        rows.iter().flat_map(|r| r.iter().copied()),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// out_dim x in_dim; rows are principal directions, divided by
    /// `sqrt(eigenvalue + epsilon)` when `whitened`.
    pub projection: DMatrix<f64>,
    /// Descending, one per output dimension.
    pub eigenvalues: DVector<f64>,
    pub epsilon: f64,
    pub whitened: bool,
}

impl PcaModel {
    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            projection: DMatrix::identity(dim, dim),
            eigenvalues: DVector::from_element(dim, 1.0),
            epsilon: 0.0,
            whitened: true,
        }
    }

    pub fn apply_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.in_dim() {
            return Err(NipError::Dim(format!(
                "PCA model expects {} dims, descriptor has {}",
                self.in_dim(),
                values.len()
            )));
        }
        let centered = DVector::from_column_slice(values) - &self.mean;
        Ok((&self.projection * centered).iter().copied().collect())
    }

    pub fn apply(&self, d: &Descriptor) -> Result<Descriptor> {
        d.with_values(self.apply_values(&d.values)?)
    }

    pub(crate) fn encode_body(&self, out: &mut Vec<u8>) {
        put_u32(out, self.in_dim() as u32);
        put_u32(out, self.out_dim() as u32);
        out.push(self.whitened as u8);
        put_f64s(out, &[self.epsilon]);
        put_f64s(out, self.mean.as_slice());
        put_f64s(out, self.eigenvalues.as_slice());
        for r in 0..self.out_dim() {
            for c in 0..self.in_dim() {
                put_f64s(out, &[self.projection[(r, c)]]);
            }
        }
    }

    pub(crate) fn decode_body(r: &mut ByteReader<'_>) -> Result<Self> {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let whitened = r.u8()? != 0;
        let epsilon = r.f64()?;
        if in_dim == 0 || out_dim == 0 || out_dim > in_dim {
            return Err(NipError::CorruptStore(format!(
                "bad PCA dims {out_dim}x{in_dim}"
            )));
        }
        let mean = DVector::from_vec(r.f64_vec(in_dim)?);
        let eigenvalues = DVector::from_vec(r.f64_vec(out_dim)?);
        let projection = DMatrix::from_row_slice(out_dim, in_dim, &r.f64_vec(out_dim * in_dim)?);
        Ok(Self {
            mean,
            projection,
            eigenvalues,
            epsilon,
            whitened,
        })
    }

    pub fn to_bytes(&self, metadata: &Metadata) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PCA_MAGIC);
        put_u32(&mut out, PCA_VERSION);
        self.encode_body(&mut out);
        metadata.write_trailer(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Metadata)> {
        let mut r = ByteReader::new(bytes);
        r.magic(PCA_MAGIC)?;
        let version = r.u32()?;
        if version != PCA_VERSION {
            return Err(NipError::CorruptStore(format!(
                "unsupported PCA model version {version}"
            )));
        }
        let model = Self::decode_body(&mut r)?;
        let meta = Metadata::read_trailer(r.rest())?;
        Ok((model, meta))
    }

    pub fn write(&self, path: impl AsRef<Path>, metadata: &Metadata) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes(metadata)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, Metadata)> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Sample mean and 1/(N-1) covariance of the rows of `data`.
pub fn mean_and_covariance(data: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = data.nrows();
    let mean = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Principal axes of `data`, eigenvalues descending. Ties keep the solver's
/// column order; each eigenvector's largest-magnitude entry is made positive
/// so the basis is deterministic.
/// Mean and (eigenvalue, eigenvector) pairs.
type Axes = (DVector<f64>, Vec<(f64, DVector<f64>)>);

fn principal_axes(data: &DMatrix<f64>, out_dim: usize) -> Result<Axes> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(NipError::Dim(format!("PCA needs at least 2 rows, got {n}")));
    }
    if out_dim == 0 || out_dim > (n - 1).min(d) {
        return Err(NipError::Dim(format!(
            "out_dim {out_dim} must be in 1..={} for {n} rows of dim {d}",
            (n - 1).min(d)
        )));
    }
    let (mean, cov) = mean_and_covariance(data);
    if cov.iter().all(|&v| v == 0.0) {
        return Err(NipError::DegenerateData("all rows are identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let axes = order
        .into_iter()
        .take(out_dim)
        .map(|k| {
            let mut v: DVector<f64> = eig.eigenvectors.column(k).into_owned();
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v.neg_mut();
            }
            (eig.eigenvalues[k].max(0.0), v)
        })
        .collect();
    Ok((mean, axes))
}

fn build_model(
    data: &DMatrix<f64>,
    out_dim: usize,
    epsilon: f64,
    whiten: bool,
) -> Result<PcaModel> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(NipError::Config(format!(
            "epsilon must be finite and >= 0, got {epsilon}"
        )));
    }
    let d = data.ncols();
    let (mean, axes) = principal_axes(data, out_dim)?;
    let top = axes[0].0;
    let mut projection = DMatrix::zeros(out_dim, d);
    let mut eigenvalues = DVector::zeros(out_dim);
    for (k, (lambda, v)) in axes.iter().enumerate() {
        eigenvalues[k] = *lambda;
        let scale = if whiten {
            let denom = lambda + epsilon;
            if denom <= top * 1e-12 {
                return Err(NipError::DegenerateData(format!(
                    "component {k} has eigenvalue {lambda}; data rank is below out_dim, use epsilon > 0"
                )));
            }
            1.0 / denom.sqrt()
        } else {
            1.0
        };
        for c in 0..d {
            projection[(k, c)] = v[c] * scale;
        }
    }
    Ok(PcaModel {
        mean,
        projection,
        eigenvalues,
        epsilon,
        whitened: whiten,
    })
}

/// Centers, projects onto the top `out_dim` principal directions and scales
/// each by `1/sqrt(eigenvalue + epsilon)`.
pub fn fit_pca_whitening(data: &DMatrix<f64>, out_dim: usize, epsilon: f64) -> Result<PcaModel> {
    build_model(data, out_dim, epsilon, true)
}

/// Plain PCA projection without the whitening scale.
pub fn fit_pca(data: &DMatrix<f64>, out_dim: usize) -> Result<PcaModel> {
    build_model(data, out_dim, 0.0, false)
}

/// Bit `j` is set iff `values[j] > threshold`.
pub fn binarize_threshold(d: &Descriptor, threshold: f64) -> BinaryHash {
    BinaryHash::from_bits(d.image_id.clone(), d.values.iter().map(|&v| v > threshold))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Per-dimension median of the training descriptors.
    Median,
    Fixed(f64),
}

/// Direct binarization with one threshold per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdModel {
    pub mode: ThresholdMode,
    pub thresholds: Vec<f64>,
}

impl ThresholdModel {
    pub fn fit(rows: &[&[f64]], mode: ThresholdMode) -> Result<Self> {
        let dim = rows
            .first()
            .ok_or_else(|| NipError::Dim("no training rows".into()))?
            .len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(NipError::Dim("ragged training rows".into()));
        }
        let thresholds = match mode {
            ThresholdMode::Fixed(t) => vec![t; dim],
            ThresholdMode::Median => (0..dim)
                .map(|j| {
                    let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                    col.sort_by(f64::total_cmp);
                    let n = col.len();
                    if n % 2 == 1 {
                        col[n / 2]
                    } else {
                        0.5 * (col[n / 2 - 1] + col[n / 2])
                    }
                })
                .collect(),
        };
        Ok(Self { mode, thresholds })
    }

    pub fn hash(&self, d: &Descriptor) -> Result<BinaryHash> {
        if d.dim() != self.thresholds.len() {
            return Err(NipError::Dim(format!(
                "threshold model expects {} dims, descriptor has {}",
                self.thresholds.len(),
                d.dim()
            )));
        }
        Ok(BinaryHash::from_bits(
            d.image_id.clone(),
            d.values.iter().zip(&self.thresholds).map(|(v, t)| v > t),
        ))
    }
}

/// Per-dimension affine map of the training range onto [0, 1]; values
/// outside the training range are clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl RangeScaler {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let dim = rows
            .first()
            .ok_or_else(|| NipError::Dim("no training rows".into()))?
            .len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(NipError::Dim("ragged training rows".into()));
        }
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for r in rows {
            for (j, &v) in r.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Constant training dimensions map to 0.
    pub fn apply_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.dim() {
            return Err(NipError::Dim(format!(
                "range scaler expects {} dims, got {}",
                self.dim(),
                values.len()
            )));
        }
        Ok(values
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let range = self.max[j] - self.min[j];
                if range > 0.0 {
                    ((v - self.min[j]) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect())
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn split_floats(key: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.parse::<f64>().map_err(|_| {
                NipError::CorruptStore(format!("bad number {x:?} in metadata key {key}"))
            })
        })
        .collect()
}

/// Input conditioning applied before a hasher, in order: L2 normalization,
/// then range scaling. Stored in the hash model's metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Preprocess {
    pub l2_normalize: bool,
    pub range: Option<RangeScaler>,
}

impl Preprocess {
    pub fn apply_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        let v = if self.l2_normalize {
            l2_normalize_values(values)
        } else {
            values.to_vec()
        };
        match &self.range {
            Some(r) => r.apply_values(&v),
            None => Ok(v),
        }
    }

    pub fn apply(&self, d: &Descriptor) -> Result<Descriptor> {
        d.with_values(self.apply_values(&d.values)?)
    }

    pub fn write_metadata(&self, meta: &mut Metadata) {
        meta.set("l2_normalize", self.l2_normalize);
        meta.set("range_scale", self.range.is_some());
        if let Some(r) = &self.range {
            meta.set("range_min", join_floats(&r.min));
            meta.set("range_max", join_floats(&r.max));
        }
    }

    /// Missing keys mean "no preprocessing".
    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let flag = |key: &str| match meta.get(key) {
            None | Some("false") => Ok(false),
            Some("true") => Ok(true),
            Some(other) => Err(NipError::CorruptStore(format!(
                "bad boolean {other:?} for {key}"
            ))),
        };
        let range = if flag("range_scale")? {
            let get = |key: &str| {
                meta.get(key)
                    .ok_or_else(|| NipError::CorruptStore(format!("missing metadata key {key}")))
                    .and_then(|s| split_floats(key, s))
            };
            let (min, max) = (get("range_min")?, get("range_max")?);
            if min.len() != max.len() {
                return Err(NipError::CorruptStore(
                    "range_min and range_max differ in length".into(),
                ));
            }
            Some(RangeScaler { min, max })
        } else {
            None
        };
        Ok(Self {
            l2_normalize: flag("l2_normalize")?,
            range,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(values: Vec<f64>) -> Descriptor {
        Descriptor::from_values("x", values).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&d(vec![3.0, 4.0])).values, vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&d(vec![0.0, 0.0])).values, vec![0.0, 0.0]);
        assert_eq!(
            l2_normalize(&d(vec![0.0, 1.0, 0.0])).values,
            vec![0.0, 1.0, 0.0]
        );
    }

    /// Brute-force 1/(N-1) covariance, independent of the nalgebra path.
    fn naive_cov(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = rows.len();
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let mut cov = vec![vec![0.0; d]; d];
        for r in rows {
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n as f64 - 1.0);
                }
            }
        }
        cov
    }

    #[test]
    fn whitening_diag_4_1_gives_identity_covariance() {
        // symmetric sample: zero mean, covariance exactly diag(4, 1)
        let raw = [[2.0, 1.0], [-2.0, -1.0], [2.0, -1.0], [-2.0, 1.0]];
        let scale = 0.75f64.sqrt();
        let rows: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| vec![r[0] * scale, r[1] * scale])
            .collect();
        let c = naive_cov(&rows);
        assert!(
            (c[0][0] - 4.0).abs() < 1e-12 && (c[1][1] - 1.0).abs() < 1e-12 && c[0][1].abs() < 1e-12
        );
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let model = fit_pca_whitening(&stack_rows(&refs).unwrap(), 2, 0.0).unwrap();
        let out: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| model.apply_values(r).unwrap())
            .collect();
        let cov = naive_cov(&out);
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((cov[a][b] - want).abs() < 1e-9, "{cov:?}");
            }
        }
        assert!(model.eigenvalues[0] >= model.eigenvalues[1]);
        assert!((model.eigenvalues[0] / model.eigenvalues[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn whitened_random_data_has_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let z: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
                vec![
                    z[0] * 3.0 + z[1],
                    z[1] * 2.0,
                    z[2] + z[3],
                    z[3],
                    z[4] * 0.1,
                    z[5] + z[0],
                ]
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let model = fit_pca_whitening(&stack_rows(&refs).unwrap(), 4, 0.0).unwrap();
        let out: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| model.apply_values(r).unwrap())
            .collect();
        let cov = naive_cov(&out);
        let mut frob = 0.0;
        for (a, row) in cov.iter().enumerate() {
            for (b, x) in row.iter().enumerate() {
                let want = if a == b { 1.0 } else { 0.0 };
                frob += (x - want).powi(2);
            }
        }
        // relative to ||I||_F = 2
        assert!(frob.sqrt() / 2.0 < 1e-6, "frobenius error {}", frob.sqrt());
    }

    #[test]
    fn dim_and_degenerate_errors() {
        let rows = [vec![1.0, 2.0], vec![3.0, 1.0], vec![0.0, 0.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = stack_rows(&refs).unwrap();
        assert!(matches!(
            fit_pca_whitening(&m, 3, 1e-5),
            Err(NipError::Dim(_))
        ));
        let same = vec![vec![1.0, 2.0]; 5];
        let refs: Vec<&[f64]> = same.iter().map(|r| r.as_slice()).collect();
        assert!(matches!(
            fit_pca_whitening(&stack_rows(&refs).unwrap(), 1, 1e-5),
            Err(NipError::DegenerateData(_))
        ));
    }

    #[test]
    fn apply_examples() {
        let rows = [
            vec![1.0, 2.0, 0.0],
            vec![3.0, 1.0, 1.0],
            vec![0.0, 0.5, 4.0],
            vec![2.0, 2.0, 2.0],
        ];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let model = fit_pca_whitening(&stack_rows(&refs).unwrap(), 2, DEFAULT_EPSILON).unwrap();
        let at_mean = model.apply_values(model.mean.as_slice()).unwrap();
        assert!(at_mean.iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(model.apply_values(&[1.0]), Err(NipError::Dim(_))));

        let id = PcaModel::identity(3);
        assert_eq!(
            id.apply_values(&[1.0, -2.0, 3.5]).unwrap(),
            vec![1.0, -2.0, 3.5]
        );
    }

    #[test]
    fn model_file_round_trip() {
        let rows = [
            vec![1.0, 2.0, 0.0],
            vec![3.0, 1.0, 1.0],
            vec![0.0, 0.5, 4.0],
        ];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let model = fit_pca_whitening(&stack_rows(&refs).unwrap(), 2, DEFAULT_EPSILON).unwrap();
        let mut meta = Metadata::new();
        meta.set("out_dim", 2);
        let (back, m2) = PcaModel::from_bytes(&model.to_bytes(&meta).unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(m2, meta);
    }

    #[test]
    fn threshold_examples() {
        let h = binarize_threshold(&d(vec![0.1, 0.9, 0.5]), 0.5);
        assert_eq!(h.to_bools(), vec![false, true, false]);
        let h = binarize_threshold(&d(vec![2.0, 3.0]), 0.5);
        assert_eq!(h.to_bools(), vec![true, true]);
        let h = binarize_threshold(&d(vec![0.25; 512]), 0.0);
        assert_eq!(h.n_bits(), 512);
    }

    #[test]
    fn median_threshold_balances_bits() {
        let rows = [
            vec![1.0, 10.0],
            vec![2.0, 20.0],
            vec![3.0, 30.0],
            vec![4.0, 40.0],
        ];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = ThresholdModel::fit(&refs, ThresholdMode::Median).unwrap();
        assert_eq!(m.thresholds, vec![2.5, 25.0]);
        let ones: usize = rows
            .iter()
            .map(|r| m.hash(&d(r.clone())).unwrap().count_ones())
            .sum();
        assert_eq!(ones, 4);
    }

    proptest! {
        #[test]
        fn pca_apply_is_affine(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3), alpha in 0.0f64..1.0) {
            let rows = [vec![1.0, 2.0, 0.0], vec![3.0, 1.0, 1.0], vec![0.0, 0.5, 4.0], vec![2.0, -1.0, 2.0]];
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let model = fit_pca_whitening(&stack_rows(&refs).unwrap(), 2, DEFAULT_EPSILON).unwrap();
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
            let lhs = model.apply_values(&mix).unwrap();
            let pa = model.apply_values(&a).unwrap();
            let pb = model.apply_values(&b).unwrap();
            for k in 0..2 {
                prop_assert!((lhs[k] - (alpha * pa[k] + (1.0 - alpha) * pb[k])).abs() < 1e-9);
            }
        }

        #[test]
        fn normalize_idempotent_and_order_preserving(v in prop::collection::vec(-10.0f64..10.0, 1..20), s in 0.01f64..100.0) {
            let n1 = l2_normalize_values(&v);
            let n2 = l2_normalize_values(&n1);
            for (x, y) in n1.iter().zip(&n2) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            let ns = l2_normalize_values(&scaled);
            for (x, y) in n1.iter().zip(&ns) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let norm: f64 = n1.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }

        #[test]
        fn raising_threshold_never_sets_bits(v in prop::collection::vec(-1.0f64..1.0, 1..40), t in -1.0f64..1.0, dt in 0.0f64..1.0) {
            let desc = d(v);
            let lo = binarize_threshold(&desc, t).to_bools();
            let hi = binarize_threshold(&desc, t + dt).to_bools();
            for (a, b) in lo.iter().zip(&hi) {
                prop_assert!(!(!a && *b));
            }
        }
    }

    #[test]
    fn range_scaler_maps_training_range_to_unit_interval() {
        let rows = [vec![1.0, 5.0, 2.0], vec![3.0, 5.0, -2.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = RangeScaler::fit(&refs).unwrap();
        assert_eq!(
            s.apply_values(&[1.0, 5.0, 2.0]).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        assert_eq!(
            s.apply_values(&[2.0, 7.0, 0.0]).unwrap(),
            vec![0.5, 0.0, 0.5]
        );
        assert_eq!(
            s.apply_values(&[9.0, 0.0, -9.0]).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert!(matches!(s.apply_values(&[1.0]), Err(NipError::Dim(_))));
    }

    #[test]
    fn preprocess_round_trips_through_metadata() {
        let p = Preprocess {
            l2_normalize: true,
            range: Some(RangeScaler {
                min: vec![0.1, -1.0 / 3.0],
                max: vec![0.7, 1e-300],
            }),
        };
        let mut meta = Metadata::new();
        p.write_metadata(&mut meta);
        assert_eq!(Preprocess::from_metadata(&meta).unwrap(), p);
        assert_eq!(
            Preprocess::from_metadata(&Metadata::new()).unwrap(),
            Preprocess::default()
        );
        let out = p.apply_values(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(out[1], 1.0);
    }
}
