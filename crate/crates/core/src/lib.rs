//! Nested invariance pooling (NIP) image descriptors, RBM-based binary
//! hashing and exhaustive Hamming/L2 retrieval evaluation.
//!
//! The pipeline runs orbit store → pooling → post-processing → hashing →
//! evaluation; each stage reads and writes a small binary container.

pub mod baselines;
pub mod binary;
pub mod container;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod groundtruth;
pub mod hasher;
pub mod pipeline;
pub mod pooling;
pub mod postproc;
pub mod rbm;
pub mod seed;
pub mod store;
pub mod synth;

pub use binary::{BinaryHash, HashCodes};
pub use container::Metadata;
pub use descriptor::{Descriptor, DescriptorSet};
pub use error::{NipError, Result};
pub use eval::{
    average_precision, bit_stats, hamming, l2, recall_at_r, EvalOptions, EvalReport, HashIndex,
    RankedList,
};
pub use groundtruth::GroundTruth;
pub use hasher::{Hasher, Method};
pub use pooling::{moment_pool, nip_descriptor, PoolOrder, PoolSequence};
pub use postproc::{PcaModel, Preprocess, RangeScaler, ThresholdMode, ThresholdModel};
pub use rbm::{RbmParams, TrainConfig};
pub use store::{OrbitShape, OrbitStore, OrbitTensor};
pub use synth::SynthSpec;
