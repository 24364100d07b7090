//! One type over every hashing method, with model files that identify
//! their method. RBM models use the `NIPR` format; the baselines share a
//! `NIPB` container with a method tag.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::baselines::{itq_hash, lsh_hash, pcahash_hash, ItqModel, LshModel};
use crate::binary::BinaryHash;
use crate::container::{put_f64s, put_u32, put_u64, write_atomic, ByteReader, Metadata};
use crate::descriptor::Descriptor;
use crate::error::{NipError, Result};
use crate::postproc::{PcaModel, ThresholdMode, ThresholdModel};
use crate::rbm::{self, RbmParams, RBM_MAGIC};

pub const BASELINE_MAGIC: &[u8; 4] = b"NIPB";
pub const BASELINE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// RBM with the batch regularizer.
    Rbmh,
    /// Same RBM trained with lambda = 0.
    Rbm,
    Lsh,
    PcaHash,
    Itq,
    /// Direct binarization of the descriptor.
    Threshold,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Rbmh => "rbmh",
            Method::Rbm => "rbm",
            Method::Lsh => "lsh",
            Method::PcaHash => "pcahash",
            Method::Itq => "itq",
            Method::Threshold => "threshold",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = NipError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "rbmh" => Method::Rbmh,
            "rbm" => Method::Rbm,
            "lsh" => Method::Lsh,
            "pcahash" | "pca" => Method::PcaHash,
            "itq" => Method::Itq,
            "threshold" | "binarized" => Method::Threshold,
            other => {
                return Err(NipError::Config(format!(
                    "unknown hashing method {other:?}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hasher {
    Rbm(RbmParams),
    Lsh(LshModel),
    PcaHash(PcaModel),
    Itq(ItqModel),
    Threshold(ThresholdModel),
}

impl Hasher {
    pub fn input_dim(&self) -> usize {
        match self {
            Hasher::Rbm(p) => p.n_visible(),
            Hasher::Lsh(m) => m.projections.ncols(),
            Hasher::PcaHash(m) => m.in_dim(),
            Hasher::Itq(m) => m.pca.in_dim(),
            Hasher::Threshold(m) => m.thresholds.len(),
        }
    }

    pub fn n_bits(&self) -> usize {
        match self {
            Hasher::Rbm(p) => p.n_hidden(),
            Hasher::Lsh(m) => m.projections.nrows(),
            Hasher::PcaHash(m) => m.out_dim(),
            Hasher::Itq(m) => m.n_bits(),
            Hasher::Threshold(m) => m.thresholds.len(),
        }
    }

    pub fn hash(&self, d: &Descriptor) -> Result<BinaryHash> {
        match self {
            Hasher::Rbm(p) => rbm::hash(p, d),
            Hasher::Lsh(m) => lsh_hash(m, d),
            Hasher::PcaHash(m) => pcahash_hash(m, d),
            Hasher::Itq(m) => itq_hash(m, d),
            Hasher::Threshold(m) => m.hash(d),
        }
    }

    pub fn to_bytes(&self, metadata: &Metadata) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let tag = match self {
            Hasher::Rbm(p) => return p.to_bytes(metadata),
            Hasher::Lsh(_) => 0u8,
            Hasher::PcaHash(_) => 1,
            Hasher::Itq(_) => 2,
            Hasher::Threshold(_) => 3,
        };
        out.extend_from_slice(BASELINE_MAGIC);
        put_u32(&mut out, BASELINE_VERSION);
        out.push(tag);
        match self {
            Hasher::Rbm(_) => unreachable!(),
            Hasher::Lsh(m) => {
                put_u32(&mut out, m.projections.nrows() as u32);
                put_u32(&mut out, m.projections.ncols() as u32);
                put_u64(&mut out, m.seed);
                put_row_major(&mut out, &m.projections);
            }
            Hasher::PcaHash(m) => m.encode_body(&mut out),
            Hasher::Itq(m) => {
                m.pca.encode_body(&mut out);
                put_u32(&mut out, m.iterations as u32);
                put_u32(&mut out, m.n_bits() as u32);
                put_row_major(&mut out, &m.rotation);
                put_f64s(&mut out, &m.loss_history);
            }
            Hasher::Threshold(m) => {
                let (mode, value) = match m.mode {
                    ThresholdMode::Median => (0u8, 0.0),
                    ThresholdMode::Fixed(t) => (1u8, t),
                };
                out.push(mode);
                put_f64s(&mut out, &[value]);
                put_u32(&mut out, m.thresholds.len() as u32);
                put_f64s(&mut out, &m.thresholds);
            }
        }
        metadata.write_trailer(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Metadata)> {
        if bytes.starts_with(RBM_MAGIC) {
            let (p, meta) = RbmParams::from_bytes(bytes)?;
            return Ok((Hasher::Rbm(p), meta));
        }
        let mut r = ByteReader::new(bytes);
        r.magic(BASELINE_MAGIC)?;
        let version = r.u32()?;
        if version != BASELINE_VERSION {
            return Err(NipError::CorruptStore(format!(
                "unsupported hash model version {version}"
            )));
        }
        let hasher = match r.u8()? {
            0 => {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let seed = r.u64()?;
                let projections = DMatrix::from_row_slice(rows, cols, &r.f64_vec(rows * cols)?);
                Hasher::Lsh(LshModel { projections, seed })
            }
            1 => Hasher::PcaHash(PcaModel::decode_body(&mut r)?),
            2 => {
                let pca = PcaModel::decode_body(&mut r)?;
                let iterations = r.u32()? as usize;
                let n = r.u32()? as usize;
                let rotation = DMatrix::from_row_slice(n, n, &r.f64_vec(n * n)?);
                let loss_history = r.f64_vec(iterations)?;
                Hasher::Itq(ItqModel {
                    pca,
                    rotation,
                    iterations,
                    loss_history,
                })
            }
            3 => {
                let mode = r.u8()?;
                let value = r.f64()?;
                let dim = r.u32()? as usize;
                let thresholds = r.f64_vec(dim)?;
                let mode = if mode == 0 {
                    ThresholdMode::Median
                } else {
                    ThresholdMode::Fixed(value)
                };
                Hasher::Threshold(ThresholdModel { mode, thresholds })
            }
            t => {
                return Err(NipError::CorruptStore(format!(
                    "unknown hash model tag {t}"
                )))
            }
        };
        let meta = Metadata::read_trailer(r.rest())?;
        Ok((hasher, meta))
    }

    pub fn write(&self, path: impl AsRef<Path>, metadata: &Metadata) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes(metadata)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, Metadata)> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            put_f64s(out, &[m[(r, c)]]);
        }
    }
}
