//! Dense global descriptors and the `NIPD` descriptor file.
//!
//! ```text
//! "NIPD" | version u32 | N u64 | dim u32 | dtype u8 (0 = f32 LE)
//! N x (id_len u16, id bytes)
//! N x dim f32 row-major
//! optional META trailer
//! ```

use std::fs;
use std::path::Path;

use crate::container::{check_id, put_id, put_u32, put_u64, write_atomic, ByteReader, Metadata};
use crate::error::{NipError, Result};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"NIPD";
pub const DESCRIPTOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub image_id: String,
    /// How the descriptor was produced, e.g. the pooling sequence.
    pub provenance: String,
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn new(
        image_id: impl Into<String>,
        provenance: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(NipError::Dim(
                "descriptor must have at least one value".into(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(NipError::Validation(format!(
                "descriptor value {v} is not finite"
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            provenance: provenance.into(),
            values,
        })
    }

    pub fn from_values(image_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        Self::new(image_id, "", values)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.image_id.clone(), self.provenance.clone(), values)
    }
}

/// An ordered collection of equal-dimension descriptors plus file metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptorSet {
    pub descriptors: Vec<Descriptor>,
    pub metadata: Metadata,
}

impl DescriptorSet {
    pub fn new(descriptors: Vec<Descriptor>, metadata: Metadata) -> Result<Self> {
        let set = Self {
            descriptors,
            metadata,
        };
        set.dim()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Common dimension; errors on an empty or ragged set.
    pub fn dim(&self) -> Result<usize> {
        let first = self
            .descriptors
            .first()
            .ok_or_else(|| NipError::Validation("empty descriptor set".into()))?;
        let dim = first.dim();
        if let Some(d) = self.descriptors.iter().find(|d| d.dim() != dim) {
            return Err(NipError::Dim(format!(
                "descriptor {:?} has dim {}, expected {dim}",
                d.image_id,
                d.dim()
            )));
        }
        Ok(dim)
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.descriptors
            .iter()
            .map(|d| d.values.as_slice())
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = self.dim()?;
        let mut out = Vec::new();
        out.extend_from_slice(DESCRIPTOR_MAGIC);
        put_u32(&mut out, DESCRIPTOR_VERSION);
        put_u64(&mut out, self.descriptors.len() as u64);
        put_u32(&mut out, dim as u32);
        out.push(0);
        for d in &self.descriptors {
            check_id(&d.image_id)?;
            put_id(&mut out, &d.image_id);
        }
        for d in &self.descriptors {
            for &v in &d.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        self.metadata.write_trailer(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DESCRIPTOR_MAGIC)?;
        let version = r.u32()?;
        if version != DESCRIPTOR_VERSION {
            return Err(NipError::CorruptStore(format!(
                "unsupported descriptor file version {version}"
            )));
        }
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        if r.u8()? != 0 {
            return Err(NipError::CorruptStore(
                "unsupported descriptor dtype".into(),
            ));
        }
        if dim == 0 || n.saturating_mul(2) > r.remaining() {
            return Err(NipError::CorruptStore(format!(
                "implausible header n={n} dim={dim}"
            )));
        }
        let ids = (0..n).map(|_| r.id()).collect::<Result<Vec<_>>>()?;
        let payload = r.f32_vec(
            n.checked_mul(dim)
                .ok_or_else(|| NipError::CorruptStore("size overflow".into()))?,
        )?;
        let metadata = Metadata::read_trailer(r.rest())?;
        let provenance = metadata.get("sequence").unwrap_or("").to_string();
        let descriptors = ids
            .into_iter()
            .zip(payload.chunks_exact(dim))
            .map(|(id, row)| {
                Descriptor::new(
                    id,
                    provenance.clone(),
                    row.iter().map(|&v| v as f64).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            descriptors,
            metadata,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
