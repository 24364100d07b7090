//! Little-endian primitives shared by every on-disk format in this crate.
//!
//! All containers follow the same layout: a fixed header starting with a
//! four byte magic, an id section, a payload, and an optional metadata
//! trailer (`META`, u32 length, UTF-8 `key=value` lines). A file must end
//! exactly at the end of its payload or at the end of a well formed trailer.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{NipError, Result};

pub const META_MAGIC: &[u8; 4] = b"META";
pub const MAX_ID_BYTES: usize = 256;

/// Ordered `key=value` pairs carried in a file trailer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces `key`. Keys keep their first insertion position.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string().replace(['\n', '\r'], " ");
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: &Metadata) {
        for (k, v) in &other.entries {
            self.set(k.clone(), v);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut meta = Metadata::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                NipError::parse(i + 1, format!("expected key=value, got {line:?}"))
            })?;
            meta.set(k, v);
        }
        Ok(meta)
    }

    pub(crate) fn write_trailer(&self, out: &mut impl Write) -> std::io::Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let text = self.to_text();
        out.write_all(META_MAGIC)?;
        out.write_all(&(text.len() as u32).to_le_bytes())?;
        out.write_all(text.as_bytes())
    }

    /// Parses whatever follows the payload. An empty tail means no metadata.
    pub(crate) fn read_trailer(tail: &[u8]) -> Result<Self> {
        if tail.is_empty() {
            return Ok(Metadata::new());
        }
        let mut r = ByteReader::new(tail);
        if r.take(4)? != META_MAGIC {
            return Err(NipError::CorruptStore(
                "unexpected bytes after payload".into(),
            ));
        }
        let len = r.u32()? as usize;
        let body = r.take(len)?;
        if r.remaining() != 0 {
            return Err(NipError::CorruptStore(
                "trailing bytes after metadata".into(),
            ));
        }
        let text = std::str::from_utf8(body)
            .map_err(|_| NipError::CorruptStore("metadata is not UTF-8".into()))?;
        Metadata::from_text(text).map_err(|e| NipError::CorruptStore(e.to_string()))
    }
}

/// Cursor over a byte slice; every short read is reported as a corrupt file.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(NipError::CorruptStore(format!(
                "unexpected end of file at byte {} (wanted {n} more, {} left)",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(too_large)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(too_large)?)?;
        Ok(decode_f32(bytes))
    }

    pub fn id(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        if len > MAX_ID_BYTES {
            return Err(NipError::CorruptStore(format!(
                "id length {len} exceeds {MAX_ID_BYTES}"
            )));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| NipError::CorruptStore("id is not UTF-8".into()))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(NipError::CorruptStore(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }
}

fn too_large() -> NipError {
    NipError::CorruptStore("declared size overflows".into())
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_id(out: &mut Vec<u8>, id: &str) {
    put_u16(out, id.len() as u16);
    out.extend_from_slice(id.as_bytes());
}

pub(crate) fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.len() > MAX_ID_BYTES {
        return Err(NipError::Validation(format!(
            "image id {id:?} must be 1..={MAX_ID_BYTES} bytes"
        )));
    }
    if id.contains(['\t', '\n', '\r', ',']) {
        return Err(NipError::Validation(format!(
            "image id {id:?} contains a tab, comma or newline"
        )));
    }
    Ok(())
}

/// Writes `bytes` to `path` via a sibling temp file so a failed run never
/// leaves a half-written artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn tmp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metadata_trailer_round_trip() {
        let mut m = Metadata::new();
        m.set("seed", 7)
            .set("sequence", "A_S,S_T,M_R")
            .set("seed", 8);
        let mut buf = Vec::new();
        m.write_trailer(&mut buf).unwrap();
        let back = Metadata::read_trailer(&buf).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("seed"), Some("8"));
    }

    #[test]
    fn truncated_trailer_is_corrupt() {
        let mut m = Metadata::new();
        m.set("k", "v");
        let mut buf = Vec::new();
        m.write_trailer(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            Metadata::read_trailer(&buf),
            Err(NipError::CorruptStore(_))
        ));
    }

    #[test]
    fn ids_with_separators_rejected() {
        assert!(check_id("a,b").is_err());
        assert!(check_id("").is_err());
        assert!(check_id(&"x".repeat(257)).is_err());
        assert!(check_id("img_001.jpg").is_ok());
    }
}
