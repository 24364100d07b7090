//! Orbit store: the on-disk container for per-image feature-map orbits.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   "NIPO" | version u32 | n_images u64 | n_rot n_scale C H W u32 | dtype u8
//! index    count u64 | count x (id_len u16, id bytes, payload offset u64), sorted by id
//! payload  one row-major [n_rot][n_scale][C][H][W] f32 block per record, in write order
//! trailer  optional META block
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::container::{
    self, check_id, decode_f32, put_id, put_u32, put_u64, ByteReader, Metadata,
};
use crate::error::{NipError, Result};

pub const STORE_MAGIC: &[u8; 4] = b"NIPO";
pub const STORE_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u8 = 0;
pub const HEADER_BYTES: usize = 4 + 4 + 8 + 5 * 4 + 1;

/// Dimensions of one orbit: rotations, scales, channels, rows, cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrbitShape {
    pub n_rot: usize,
    pub n_scale: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl OrbitShape {
    pub fn new(n_rot: usize, n_scale: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            n_rot,
            n_scale,
            channels,
            height,
            width,
        }
    }

    /// 36 rotations, 10 center crops, 512 pool5 maps of 7x7.
    pub fn vgg_pool5() -> Self {
        Self::new(36, 10, 512, 7, 7)
    }

    pub fn dims(&self) -> [usize; 5] {
        [
            self.n_rot,
            self.n_scale,
            self.channels,
            self.height,
            self.width,
        ]
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.numel() * 4
    }

    fn check(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(NipError::ShapeMismatch(format!(
                "every orbit dimension must be >= 1, got {self}"
            )));
        }
        if self.dims().iter().any(|&d| d > u32::MAX as usize) {
            return Err(NipError::ShapeMismatch(format!(
                "orbit dimension exceeds u32: {self}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for OrbitShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}][{}][{}][{}][{}]",
            self.n_rot, self.n_scale, self.channels, self.height, self.width
        )
    }
}

/// Feature maps of one image sampled over its rotation/scale orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitTensor {
    pub image_id: String,
    shape: OrbitShape,
    data: Vec<f32>,
}

impl OrbitTensor {
    pub fn new(image_id: impl Into<String>, shape: OrbitShape, data: Vec<f32>) -> Result<Self> {
        shape.check()?;
        if data.len() != shape.numel() {
            return Err(NipError::ShapeMismatch(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            shape,
            data,
        })
    }

    pub fn filled(image_id: impl Into<String>, shape: OrbitShape, value: f32) -> Result<Self> {
        Self::new(image_id, shape, vec![value; shape.numel()])
    }

    pub fn shape(&self) -> OrbitShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn index(&self, rot: usize, scale: usize, channel: usize, row: usize, col: usize) -> usize {
        let s = &self.shape;
        (((rot * s.n_scale + scale) * s.channels + channel) * s.height + row) * s.width + col
    }

    pub fn get(&self, rot: usize, scale: usize, channel: usize, row: usize, col: usize) -> f32 {
        self.data[self.index(rot, scale, channel, row, col)]
    }

    /// First value violating the finite / non-negative invariant, as (flat index, value).
    pub fn first_invalid(&self) -> Option<(usize, f32)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
            .map(|(i, v)| (i, *v))
    }

    pub fn validate(&self) -> Result<()> {
        check_id(&self.image_id)?;
        if let Some((i, v)) = self.first_invalid() {
            return Err(NipError::Validation(format!(
                "orbit {:?}: value {v} at flat index {i} is not a finite non-negative number",
                self.image_id
            )));
        }
        Ok(())
    }

    /// Cyclic shift of the rotation axis by `steps` samples. The orbit of an
    /// image rotated by `steps` rotation increments is this shift of its own orbit.
    pub fn rotate_samples(&self, steps: usize) -> Self {
        let n_rot = self.shape.n_rot;
        let block = self.data.len() / n_rot;
        let mut data = vec![0.0; self.data.len()];
        for r in 0..n_rot {
            let dst = (r + steps) % n_rot;
            data[dst * block..(dst + 1) * block]
                .copy_from_slice(&self.data[r * block..(r + 1) * block]);
        }
        Self {
            image_id: self.image_id.clone(),
            shape: self.shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u32,
    pub n_images: u64,
    pub shape: OrbitShape,
    pub dtype_code: u8,
}

impl StoreHeader {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(STORE_MAGIC);
        put_u32(out, self.version);
        put_u64(out, self.n_images);
        for d in self.shape.dims() {
            put_u32(out, d as u32);
        }
        out.push(self.dtype_code);
    }

    /// Parses the raw header fields without judging them.
    fn decode_raw(r: &mut ByteReader<'_>) -> Result<([u8; 4], Self)> {
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        let version = r.u32()?;
        let n_images = r.u64()?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let dtype_code = r.u8()?;
        Ok((
            magic,
            Self {
                version,
                n_images,
                shape: OrbitShape::new(dims[0], dims[1], dims[2], dims[3], dims[4]),
                dtype_code,
            },
        ))
    }

    fn problems(&self, magic: &[u8; 4]) -> Vec<String> {
        let mut out = Vec::new();
        if magic != STORE_MAGIC {
            out.push(format!("bad magic {:?}", String::from_utf8_lossy(magic)));
        }
        if self.version != STORE_VERSION {
            out.push(format!("unsupported version {}", self.version));
        }
        if self.dtype_code != DTYPE_F32_LE {
            out.push(format!("unsupported dtype code {}", self.dtype_code));
        }
        if self.shape.dims().contains(&0) {
            out.push(format!("zero dimension in shape {}", self.shape));
        }
        out
    }
}

pub fn write_store(records: &[OrbitTensor], path: impl AsRef<Path>) -> Result<()> {
    write_store_with_metadata(records, path, &Metadata::new())
}

/// Writes `records` with the given trailer metadata. Nothing is created on
/// disk unless every record passes validation.
pub fn write_store_with_metadata(
    records: &[OrbitTensor],
    path: impl AsRef<Path>,
    metadata: &Metadata,
) -> Result<()> {
    let path = path.as_ref();
    let first = records
        .first()
        .ok_or_else(|| NipError::Validation("cannot write an empty orbit store".into()))?;
    let shape = first.shape;
    for rec in records {
        if rec.shape != shape {
            return Err(NipError::ShapeMismatch(format!(
                "orbit {:?} has shape {}, store shape is {shape}",
                rec.image_id, rec.shape
            )));
        }
        rec.validate()?;
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].image_id.cmp(&records[b].image_id));
    if let Some(w) = order
        .windows(2)
        .find(|w| records[w[0]].image_id == records[w[1]].image_id)
    {
        return Err(NipError::Validation(format!(
            "duplicate image id {:?}",
            records[w[0]].image_id
        )));
    }

    let mut head = Vec::new();
    StoreHeader {
        version: STORE_VERSION,
        n_images: records.len() as u64,
        shape,
        dtype_code: DTYPE_F32_LE,
    }
    .encode(&mut head);
    let index_bytes: usize = 8 + records
        .iter()
        .map(|r| 2 + r.image_id.len() + 8)
        .sum::<usize>();
    let payload_start = (head.len() + index_bytes) as u64;
    let rec_bytes = shape.payload_bytes() as u64;
    put_u64(&mut head, records.len() as u64);
    for &i in &order {
        put_id(&mut head, &records[i].image_id);
        put_u64(&mut head, payload_start + i as u64 * rec_bytes);
    }
    debug_assert_eq!(head.len() as u64, payload_start);

    let tmp = container::tmp_sibling(path);
    let result = (|| -> Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&head)?;
        let mut buf = Vec::with_capacity(rec_bytes as usize);
        for rec in records {
            buf.clear();
            for v in &rec.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        metadata.write_trailer(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Read-only handle on a store file. Reads are serialized through an
/// internal lock, so a shared `&OrbitStore` can be used from many threads.
#[derive(Debug)]
pub struct OrbitStore {
    path: PathBuf,
    header: StoreHeader,
    /// (id, payload offset), sorted by id.
    index: Vec<(String, u64)>,
    /// Record ids in payload order.
    order: Vec<String>,
    metadata: Metadata,
    file: Mutex<File>,
}

impl OrbitStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path)?;
        let file_len = file.metadata()?.len();

        let mut head = vec![0u8; HEADER_BYTES.min(file_len as usize)];
        file.read_exact(&mut head)?;
        let mut r = ByteReader::new(&head);
        let (magic, header) = StoreHeader::decode_raw(&mut r)?;
        if let Some(p) = header.problems(&magic).into_iter().next() {
            return Err(NipError::CorruptStore(p));
        }

        let (index, index_end) = read_index(&mut file, file_len)?;
        if index.len() as u64 != header.n_images {
            return Err(NipError::CorruptStore(format!(
                "header declares {} images, index has {}",
                header.n_images,
                index.len()
            )));
        }
        if index.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(NipError::CorruptStore(
                "index is not strictly sorted by id".into(),
            ));
        }
        let rec_bytes = header.shape.payload_bytes() as u64;
        let payload_end = index_end + rec_bytes * header.n_images;
        let mut by_offset: Vec<(u64, &str)> =
            index.iter().map(|(id, off)| (*off, id.as_str())).collect();
        by_offset.sort();
        for (k, (off, id)) in by_offset.iter().enumerate() {
            if *off != index_end + k as u64 * rec_bytes {
                return Err(NipError::CorruptStore(format!(
                    "record {id:?} has an invalid payload offset {off}"
                )));
            }
        }
        if file_len < payload_end {
            return Err(NipError::CorruptStore(format!(
                "payload length mismatch: file has {file_len} bytes, header and index require {payload_end}"
            )));
        }
        let mut tail = Vec::new();
        file.seek(SeekFrom::Start(payload_end))?;
        file.read_to_end(&mut tail)?;
        let metadata = Metadata::read_trailer(&tail)?;
        let order = by_offset.iter().map(|(_, id)| id.to_string()).collect();

        Ok(Self {
            path,
            header,
            index,
            order,
            metadata,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn shape(&self) -> OrbitShape {
        self.header.shape
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Ids in the order the records were written.
    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.lookup(image_id).is_some()
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    fn lookup(&self, image_id: &str) -> Option<u64> {
        self.index
            .binary_search_by(|(id, _)| id.as_str().cmp(image_id))
            .ok()
            .map(|i| self.index[i].1)
    }

    pub fn read_orbit(&self, image_id: &str) -> Result<OrbitTensor> {
        let offset = self
            .lookup(image_id)
            .ok_or_else(|| NipError::NotFound(image_id.to_string()))?;
        let shape = self.header.shape;
        let mut buf = vec![0u8; shape.payload_bytes()];
        {
            let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
            f.seek(SeekFrom::Start(offset))?;
            f.read_exact(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => {
                    NipError::CorruptStore(format!("payload of {image_id:?} is truncated"))
                }
                _ => NipError::Io(e),
            })?;
        }
        OrbitTensor::new(image_id, shape, decode_f32(&buf))
    }

    /// All records in write order.
    pub fn read_all(&self) -> Result<Vec<OrbitTensor>> {
        self.order.iter().map(|id| self.read_orbit(id)).collect()
    }
}

fn read_index(file: &mut File, file_len: u64) -> Result<(Vec<(String, u64)>, u64)> {
    file.seek(SeekFrom::Start(HEADER_BYTES as u64))?;
    let mut count_buf = [0u8; 8];
    file.read_exact(&mut count_buf)
        .map_err(|_| NipError::CorruptStore("missing index".into()))?;
    let count = u64::from_le_bytes(count_buf);
    // every entry takes at least 10 bytes
    if count.saturating_mul(10) > file_len {
        return Err(NipError::CorruptStore(format!(
            "index count {count} exceeds file size"
        )));
    }
    let mut entries = Vec::with_capacity(count as usize);
    let mut reader = std::io::BufReader::new(&mut *file);
    let mut pos = HEADER_BYTES as u64 + 8;
    for _ in 0..count {
        let mut len_buf = [0u8; 2];
        reader
            .read_exact(&mut len_buf)
            .map_err(|_| NipError::CorruptStore("index truncated".into()))?;
        let len = u16::from_le_bytes(len_buf) as usize;
        if len > container::MAX_ID_BYTES {
            return Err(NipError::CorruptStore(format!(
                "id length {len} exceeds limit"
            )));
        }
        let mut rest = vec![0u8; len + 8];
        reader
            .read_exact(&mut rest)
            .map_err(|_| NipError::CorruptStore("index truncated".into()))?;
        let id = String::from_utf8(rest[..len].to_vec())
            .map_err(|_| NipError::CorruptStore("id is not UTF-8".into()))?;
        let offset = u64::from_le_bytes(rest[len..].try_into().unwrap());
        entries.push((id, offset));
        pos += 2 + len as u64 + 8;
    }
    Ok((entries, pos))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FindingKind {
    Header,
    Index,
    Shape,
    NonFinite,
    Negative,
    Trailer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub kind: FindingKind,
    pub record: Option<String>,
    pub flat_index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(r) = &self.record {
            write!(f, " record={r}")?;
        }
        if let Some(i) = self.flat_index {
            write!(f, " index={i}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub records_checked: usize,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }

    fn push(
        &mut self,
        kind: FindingKind,
        record: Option<&str>,
        flat_index: Option<usize>,
        message: String,
    ) {
        self.findings.push(Finding {
            kind,
            record: record.map(str::to_string),
            flat_index,
            message,
        });
    }
}

/// Checks every structural and value invariant of a store file and reports
/// all violations instead of stopping at the first one.
pub fn validate_store(path: impl AsRef<Path>) -> Result<ValidationReport> {
    let bytes = fs::read(path)?;
    let mut report = ValidationReport::default();
    let mut r = ByteReader::new(&bytes);
    let (magic, header) = match StoreHeader::decode_raw(&mut r) {
        Ok(h) => h,
        Err(e) => {
            report.push(FindingKind::Header, None, None, e.to_string());
            return Ok(report);
        }
    };
    let header_problems = header.problems(&magic);
    if !header_problems.is_empty() {
        for p in header_problems {
            report.push(FindingKind::Header, None, None, p);
        }
        return Ok(report);
    }

    let index = match parse_index_lenient(&mut r) {
        Ok(ix) => ix,
        Err(e) => {
            report.push(FindingKind::Index, None, None, e.to_string());
            return Ok(report);
        }
    };
    let index_end = r.position() as u64;
    if index.len() as u64 != header.n_images {
        report.push(
            FindingKind::Header,
            None,
            None,
            format!(
                "header n_images = {} but index has {} entries",
                header.n_images,
                index.len()
            ),
        );
    }
    for w in index.windows(2) {
        if w[0].0 >= w[1].0 {
            report.push(
                FindingKind::Index,
                Some(&w[1].0),
                None,
                "index not strictly sorted by id (duplicate or out of order)".into(),
            );
        }
    }

    let shape = header.shape;
    let rec_bytes = shape.payload_bytes() as u64;
    let mut max_end = index_end;
    for (id, offset) in &index {
        report.records_checked += 1;
        let off = *offset;
        if off < index_end || !(off - index_end).is_multiple_of(rec_bytes) {
            report.push(
                FindingKind::Index,
                Some(id),
                None,
                format!("invalid payload offset {off}"),
            );
            continue;
        }
        let end = off + rec_bytes;
        max_end = max_end.max(end);
        if end > bytes.len() as u64 {
            report.push(
                FindingKind::Shape,
                Some(id),
                None,
                format!(
                    "payload needs {rec_bytes} bytes for shape {shape}, only {} available",
                    (bytes.len() as u64).saturating_sub(off)
                ),
            );
            continue;
        }
        let values = decode_f32(&bytes[off as usize..end as usize]);
        check_values(&mut report, id, &values);
    }

    let expected_end = index_end + rec_bytes * index.len() as u64;
    if (bytes.len() as u64) < expected_end {
        report.push(
            FindingKind::Shape,
            None,
            None,
            format!("file has {} bytes, {} required", bytes.len(), expected_end),
        );
    } else if let Err(e) = Metadata::read_trailer(&bytes[expected_end.max(max_end) as usize..]) {
        report.push(FindingKind::Trailer, None, None, e.to_string());
    }
    Ok(report)
}

fn check_values(report: &mut ValidationReport, id: &str, values: &[f32]) {
    let mut non_finite = values.iter().enumerate().filter(|(_, v)| !v.is_finite());
    if let Some((i, v)) = non_finite.next() {
        let extra = non_finite.count();
        report.push(
            FindingKind::NonFinite,
            Some(id),
            Some(i),
            format!("value {v} is not finite ({extra} more in this record)"),
        );
    }
    let mut negative = values.iter().enumerate().filter(|(_, v)| **v < 0.0);
    if let Some((i, v)) = negative.next() {
        let extra = negative.count();
        report.push(
            FindingKind::Negative,
            Some(id),
            Some(i),
            format!("value {v} is negative ({extra} more in this record)"),
        );
    }
}

fn parse_index_lenient(r: &mut ByteReader<'_>) -> Result<Vec<(String, u64)>> {
    let count = r.u64()?;
    if count.saturating_mul(10) > r.remaining() as u64 {
        return Err(NipError::CorruptStore(format!(
            "index count {count} exceeds file size"
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = r.id()?;
        let off = r.u64()?;
        out.push((id, off));
    }
    Ok(out)
}
