//! Packed binary hashes and the `NIPH` hash file.
//!
//! Bit `j` lives in byte `j / 8` at position `j % 8` (LSB first); padding
//! bits past `n_bits` are always zero.
//!
//! ```text
//! "NIPH" | version u32 | N u64 | n_bits u32
//! N x (id_len u16, id bytes)
//! N x ceil(n_bits / 8) bytes
//! optional META trailer
//! ```

use std::fs;
use std::path::Path;

use crate::container::{check_id, put_id, put_u32, put_u64, write_atomic, ByteReader, Metadata};
use crate::error::{NipError, Result};

pub const HASH_MAGIC: &[u8; 4] = b"NIPH";
pub const HASH_VERSION: u32 = 1;

pub fn stride_bytes(n_bits: usize) -> usize {
    n_bits.div_ceil(8)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryHash {
    pub image_id: String,
    n_bits: usize,
    bits: Vec<u8>,
}

impl BinaryHash {
    pub fn zeros(image_id: impl Into<String>, n_bits: usize) -> Self {
        Self {
            image_id: image_id.into(),
            n_bits,
            bits: vec![0; stride_bytes(n_bits)],
        }
    }

    pub fn from_bits(image_id: impl Into<String>, bits: impl IntoIterator<Item = bool>) -> Self {
        let bits: Vec<bool> = bits.into_iter().collect();
        let mut h = Self::zeros(image_id, bits.len());
        for (j, b) in bits.into_iter().enumerate() {
            if b {
                h.set(j, true);
            }
        }
        h
    }

    /// Wraps already packed bytes; padding bits must be zero.
    pub fn from_packed(image_id: impl Into<String>, n_bits: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != stride_bytes(n_bits) {
            return Err(NipError::Dim(format!(
                "{n_bits} bits need {} bytes, got {}",
                stride_bytes(n_bits),
                bits.len()
            )));
        }
        if !n_bits.is_multiple_of(8) {
            let mask = !((1u8 << (n_bits % 8)) - 1);
            if bits[bits.len() - 1] & mask != 0 {
                return Err(NipError::Validation(
                    "padding bits beyond n_bits are set".into(),
                ));
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            n_bits,
            bits,
        })
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, j: usize) -> bool {
        assert!(
            j < self.n_bits,
            "bit {j} out of range for {} bits",
            self.n_bits
        );
        self.bits[j / 8] >> (j % 8) & 1 == 1
    }

    pub fn set(&mut self, j: usize, value: bool) {
        assert!(
            j < self.n_bits,
            "bit {j} out of range for {} bits",
            self.n_bits
        );
        if value {
            self.bits[j / 8] |= 1 << (j % 8);
        } else {
            self.bits[j / 8] &= !(1 << (j % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.n_bits).map(|j| self.get(j)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HashCodes {
    pub hashes: Vec<BinaryHash>,
    pub metadata: Metadata,
}

impl HashCodes {
    pub fn new(hashes: Vec<BinaryHash>, metadata: Metadata) -> Result<Self> {
        let set = Self { hashes, metadata };
        set.n_bits()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }

    pub fn n_bits(&self) -> Result<usize> {
        let first = self
            .hashes
            .first()
            .ok_or_else(|| NipError::Validation("empty hash set".into()))?;
        if let Some(h) = self.hashes.iter().find(|h| h.n_bits != first.n_bits) {
            return Err(NipError::Dim(format!(
                "hash {:?} has {} bits, expected {}",
                h.image_id, h.n_bits, first.n_bits
            )));
        }
        Ok(first.n_bits)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n_bits = self.n_bits()?;
        let mut out = Vec::new();
        out.extend_from_slice(HASH_MAGIC);
        put_u32(&mut out, HASH_VERSION);
        put_u64(&mut out, self.hashes.len() as u64);
        put_u32(&mut out, n_bits as u32);
        for h in &self.hashes {
            check_id(&h.image_id)?;
            put_id(&mut out, &h.image_id);
        }
        for h in &self.hashes {
            out.extend_from_slice(&h.bits);
        }
        self.metadata.write_trailer(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(HASH_MAGIC)?;
        let version = r.u32()?;
        if version != HASH_VERSION {
            return Err(NipError::CorruptStore(format!(
                "unsupported hash file version {version}"
            )));
        }
        let n = r.u64()? as usize;
        let n_bits = r.u32()? as usize;
        if n_bits == 0 || n.saturating_mul(2) > r.remaining() {
            return Err(NipError::CorruptStore(format!(
                "implausible header n={n} n_bits={n_bits}"
            )));
        }
        let ids = (0..n).map(|_| r.id()).collect::<Result<Vec<_>>>()?;
        let stride = stride_bytes(n_bits);
        let payload = r.take(n * stride)?;
        let metadata = Metadata::read_trailer(r.rest())?;
        let hashes = ids
            .into_iter()
            .zip(payload.chunks_exact(stride))
            .map(|(id, code)| {
                BinaryHash::from_packed(id, n_bits, code.to_vec())
                    .map_err(|e| NipError::CorruptStore(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { hashes, metadata })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
