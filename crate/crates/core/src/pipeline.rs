//! Stage functions shared by the `nip` binary and the library users:
//! pooling a whole store, fitting a hasher with its input conditioning,
//! and hashing descriptor sets.

use std::path::Path;

use rayon::prelude::*;

use crate::baselines::{itq_fit, lsh_fit, pcahash_fit, DEFAULT_ITQ_ITERATIONS};
use crate::binary::BinaryHash;
use crate::container::Metadata;
use crate::descriptor::Descriptor;
use crate::error::{NipError, Result};
use crate::hasher::{Hasher, Method};
use crate::pooling::{nip_descriptor, PoolSequence};
use crate::postproc::{
    l2_normalize, stack_rows, Preprocess, RangeScaler, ThresholdMode, ThresholdModel,
};
use crate::rbm::{init_rbm, train, TrainConfig, TrainHistory};
use crate::store::OrbitStore;

/// NIP descriptors for every image of a store, in store order.
pub fn pool_store(store: &OrbitStore, seq: &PoolSequence, l2: bool) -> Result<Vec<Descriptor>> {
    if store.is_empty() {
        return Err(NipError::Validation("orbit store is empty".into()));
    }
    store
        .ids()
        .par_iter()
        .map(|id| {
            let orbit = store.read_orbit(id)?;
            let d = nip_descriptor(&orbit, seq).map_err(|e| e.context(format!("image {id:?}")))?;
            Ok(if l2 { l2_normalize(&d) } else { d })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashSpec {
    pub method: Method,
    /// Ignored by the threshold method, which emits one bit per dimension.
    pub n_bits: usize,
    pub train: TrainConfig,
    pub itq_iterations: usize,
    pub threshold: ThresholdMode,
    pub l2_normalize: bool,
    /// `None` selects the method default: on for RBM methods, off otherwise.
    pub range_scale: Option<bool>,
}

impl HashSpec {
    pub fn new(method: Method, n_bits: usize) -> Self {
        Self {
            method,
            n_bits,
            train: TrainConfig::default(),
            itq_iterations: DEFAULT_ITQ_ITERATIONS,
            threshold: ThresholdMode::Median,
            l2_normalize: false,
            range_scale: None,
        }
    }

    pub fn uses_range_scale(&self) -> bool {
        self.range_scale
            .unwrap_or(matches!(self.method, Method::Rbmh | Method::Rbm))
    }

    /// Training configuration actually used; the plain RBM forces lambda = 0.
    pub fn effective_train(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        if self.method == Method::Rbm {
            cfg.lambda = 0.0;
        }
        cfg
    }

    pub fn to_metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.set("method", self.method).set("n_bits", self.n_bits);
        match self.method {
            Method::Rbmh | Method::Rbm => m.extend(&self.effective_train().to_metadata()),
            Method::Lsh => {
                m.set("seed", self.train.seed);
            }
            Method::Itq => {
                m.set("seed", self.train.seed)
                    .set("itq_iterations", self.itq_iterations);
            }
            Method::PcaHash => {
                m.set("centered", true);
            }
            Method::Threshold => {
                m.set(
                    "threshold",
                    match self.threshold {
                        ThresholdMode::Median => "median".to_string(),
                        ThresholdMode::Fixed(t) => t.to_string(),
                    },
                );
            }
        }
        m
    }
}

/// A hasher together with the conditioning its inputs need.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedHasher {
    pub hasher: Hasher,
    pub preprocess: Preprocess,
}

impl FittedHasher {
    pub fn input_dim(&self) -> usize {
        self.hasher.input_dim()
    }

    pub fn n_bits(&self) -> usize {
        self.hasher.n_bits()
    }

    pub fn hash(&self, d: &Descriptor) -> Result<BinaryHash> {
        if d.dim() != self.input_dim() {
            return Err(NipError::Dim(format!(
                "descriptor {:?} has {} dims but the hash model expects {}",
                d.image_id,
                d.dim(),
                self.input_dim()
            )));
        }
        self.hasher.hash(&self.preprocess.apply(d)?)
    }

    pub fn hash_all(&self, descriptors: &[Descriptor]) -> Result<Vec<BinaryHash>> {
        descriptors.par_iter().map(|d| self.hash(d)).collect()
    }

    /// Writes the model; `metadata` is extended with the preprocessing keys.
    pub fn write(&self, path: impl AsRef<Path>, metadata: &Metadata) -> Result<()> {
        let mut meta = metadata.clone();
        self.preprocess.write_metadata(&mut meta);
        self.hasher.write(path, &meta)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, Metadata)> {
        let (hasher, meta) = Hasher::read(path)?;
        let preprocess = Preprocess::from_metadata(&meta)?;
        if let Some(r) = &preprocess.range {
            if r.dim() != hasher.input_dim() {
                return Err(NipError::CorruptStore(format!(
                    "range scaler has {} dims, hasher expects {}",
                    r.dim(),
                    hasher.input_dim()
                )));
            }
        }
        Ok((Self { hasher, preprocess }, meta))
    }
}

pub fn fit_hasher(
    descriptors: &[Descriptor],
    spec: &HashSpec,
) -> Result<(FittedHasher, Option<TrainHistory>)> {
    let first = descriptors
        .first()
        .ok_or_else(|| NipError::Validation("no training descriptors".into()))?;
    let dim = first.dim();
    if let Some(d) = descriptors.iter().find(|d| d.dim() != dim) {
        return Err(NipError::Dim(format!(
            "descriptor {:?} has {} dims, expected {dim}",
            d.image_id,
            d.dim()
        )));
    }
    if spec.n_bits == 0 && spec.method != Method::Threshold {
        return Err(NipError::Config("n_bits must be >= 1".into()));
    }
    let mut preprocess = Preprocess {
        l2_normalize: spec.l2_normalize,
        range: None,
    };
    let mut rows: Vec<Vec<f64>> = descriptors
        .iter()
        .map(|d| preprocess.apply_values(&d.values))
        .collect::<Result<_>>()?;
    if spec.uses_range_scale() {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let scaler = RangeScaler::fit(&refs)?;
        rows = rows
            .iter()
            .map(|r| scaler.apply_values(r))
            .collect::<Result<_>>()?;
        preprocess.range = Some(scaler);
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let seed = spec.train.seed;
    let mut history = None;
    let hasher = match spec.method {
        Method::Rbmh | Method::Rbm => {
            let data = stack_rows(&refs)?;
            let cfg = spec.effective_train();
            let (params, h) = train(init_rbm(dim, spec.n_bits, seed), &data, &cfg)?;
            history = Some(h);
            Hasher::Rbm(params)
        }
        Method::Lsh => Hasher::Lsh(lsh_fit(dim, spec.n_bits, seed)?),
        Method::PcaHash => Hasher::PcaHash(pcahash_fit(&stack_rows(&refs)?, spec.n_bits)?),
        Method::Itq => Hasher::Itq(itq_fit(
            &stack_rows(&refs)?,
            spec.n_bits,
            spec.itq_iterations,
            seed,
        )?),
        Method::Threshold => Hasher::Threshold(ThresholdModel::fit(&refs, spec.threshold)?),
    };
    Ok((FittedHasher { hasher, preprocess }, history))
}
