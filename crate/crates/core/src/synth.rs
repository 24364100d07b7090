//! Clustered synthetic orbits with known ground truth.
//!
//! Each cluster has a non-negative center tensor whose channels carry
//! random amplitudes. An item is the center cyclically shifted along the
//! rotation axis, plus independent Gaussian noise, clipped at zero.
//! Item ids are a seeded permutation, so id order carries no cluster
//! information.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NipError, Result};
use crate::groundtruth::GroundTruth;
use crate::seed::{stream_rng, STREAM_SYNTH};
use crate::store::{OrbitShape, OrbitTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_clusters: usize,
    pub items_per_cluster: usize,
    pub shape: OrbitShape,
    /// Standard deviation of per-item noise.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.items_per_cluster == 0 {
            return Err(NipError::Config(
                "synthetic set needs at least one cluster and one item".into(),
            ));
        }
        if self.shape.numel() == 0 {
            return Err(NipError::Config(format!(
                "empty orbit shape {}",
                self.shape
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(NipError::Config(format!(
                "noise must be finite and >= 0, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// Items in cluster-major order.
    pub orbits: Vec<OrbitTensor>,
    /// Item ids per cluster.
    pub groups: Vec<Vec<String>>,
    /// Every item queries its own cluster.
    pub ground_truth: GroundTruth,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, STREAM_SYNTH);
    let shape = spec.shape;
    let numel = shape.numel();
    let per_rot = numel / shape.n_rot;
    let per_channel = shape.height * shape.width;
    let mut orbits = Vec::with_capacity(spec.n_clusters * spec.items_per_cluster);
    let mut groups = Vec::with_capacity(spec.n_clusters);
    let total = spec.n_clusters * spec.items_per_cluster;
    let mut labels: Vec<usize> = (0..total).collect();
    labels.shuffle(&mut rng);
    let mut center = vec![0f64; numel];
    for c in 0..spec.n_clusters {
        let amps: Vec<f64> = (0..shape.channels)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                a.abs()
            })
            .collect();
        for (i, v) in center.iter_mut().enumerate() {
            let ch = (i / per_channel) % shape.channels;
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = amps[ch] * z.abs();
        }
        let mut members = Vec::with_capacity(spec.items_per_cluster);
        for k in 0..spec.items_per_cluster {
            let shift = rng.random_range(0..shape.n_rot);
            let mut data = vec![0f32; numel];
            for (i, out) in data.iter_mut().enumerate() {
                let rot = i / per_rot;
                let src = ((rot + shift) % shape.n_rot) * per_rot + i % per_rot;
                let z: f64 = StandardNormal.sample(&mut rng);
                *out = (center[src] + spec.noise * z).max(0.0) as f32;
            }
            let id = format!("img{:06}", labels[c * spec.items_per_cluster + k]);
            orbits.push(OrbitTensor::new(id.clone(), shape, data)?);
            members.push(id);
        }
        groups.push(members);
    }
    let ground_truth = GroundTruth::from_groups(&groups);
    Ok(SynthData {
        orbits,
        groups,
        ground_truth,
    })
}
