//! C ABI over `nip-core`.
//!
//! Every fallible call returns a [`NipStatus`]. On failure the message is
//! kept per thread and can be read with [`nip_last_error`]. Objects are
//! opaque handles released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use nip_core::descriptor::Descriptor;
use nip_core::eval::hamming_packed;
use nip_core::pipeline::FittedHasher;
use nip_core::{
    moment_pool, nip_descriptor, HashCodes, HashIndex, NipError, OrbitShape, OrbitStore,
    OrbitTensor, PoolOrder, PoolSequence,
};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NipStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Shape = 5,
    Validation = 6,
    NotFound = 7,
    Corrupt = 8,
    Parse = 9,
    Domain = 10,
    Dim = 11,
    DegenerateData = 12,
    NumericalDivergence = 13,
    Metric = 14,
    Config = 15,
    Panic = 16,
}

impl From<&NipError> for NipStatus {
    fn from(e: &NipError) -> Self {
        match e {
            NipError::Io(_) => NipStatus::Io,
            NipError::ShapeMismatch(_) => NipStatus::Shape,
            NipError::Validation(_) => NipStatus::Validation,
            NipError::NotFound(_) => NipStatus::NotFound,
            NipError::CorruptStore(_) => NipStatus::Corrupt,
            NipError::Parse { .. } => NipStatus::Parse,
            NipError::EmptyOrbit | NipError::Domain(_) | NipError::AxisReused(_) => {
                NipStatus::Domain
            }
            NipError::Dim(_) => NipStatus::Dim,
            NipError::DegenerateData(_) => NipStatus::DegenerateData,
            NipError::NumericalDivergence(_) => NipStatus::NumericalDivergence,
            NipError::OracleTooLarge(_) | NipError::Config(_) => NipStatus::Config,
            NipError::Metric(_) => NipStatus::Metric,
        }
    }
}

/// Opened orbit store.
pub struct NipStore(OrbitStore);

/// Trained hash model with its input preprocessing.
pub struct NipHasher(FittedHasher);

/// Packed binary codes ready for linear-scan search.
pub struct NipIndex {
    index: HashIndex,
    ids: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(NipStatus, String);

impl From<NipError> for Failure {
    fn from(e: NipError) -> Self {
        Failure(NipStatus::from(&e), e.to_string())
    }
}

fn fail(status: NipStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NipStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            NipStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(NipStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        fail(
            NipStatus::InvalidArgument,
            format!("{name} is not valid UTF-8"),
        )
    })
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    str_arg(p, "path").map(PathBuf::from)
}

unsafe fn path_display(p: *const c_char) -> String {
    CStr::from_ptr(p).to_string_lossy().into_owned()
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(NipStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(NipStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(NipStatus::NullPointer, format!("{name} is null")))
}

/// Writes `values` to `out` when it fits; `out_len` always receives the
/// required length.
unsafe fn write_out<T: Copy>(
    values: &[T],
    out: *mut T,
    capacity: usize,
    out_len: *mut usize,
) -> Result<(), Failure> {
    *out_arg(out_len, "out_len")? = values.len();
    if capacity < values.len() {
        return Err(fail(
            NipStatus::BufferTooSmall,
            format!("buffer holds {capacity} elements, {} needed", values.len()),
        ));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(fail(NipStatus::NullPointer, "output buffer is null"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

fn order_from(n: u32) -> Result<PoolOrder, Failure> {
    Ok(if n == u32::MAX {
        PoolOrder::MAX
    } else {
        PoolOrder::finite(n)?
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nip_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn nip_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Power mean of `len` non-negative values. `order` is the moment order
/// (1 = average, 2 = root mean square) or `UINT32_MAX` for the max.
///
/// # Safety
/// `values` must point to `len` readable doubles and `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn nip_moment_pool(
    values: *const f64,
    len: usize,
    order: u32,
    out: *mut f64,
) -> NipStatus {
    guard(|| {
        let v = slice_arg(values, len, "values")?;
        let out = out_arg(out, "out")?;
        *out = moment_pool(v, order_from(order)?)?;
        Ok(())
    })
}

/// Pools one orbit tensor given as a dense row-major float array of shape
/// `dims = {rotations, scales, channels, height, width}`. `sequence` is a
/// pooling string such as `"A_S,S_T,M_R"`. The descriptor is written to
/// `out` when `capacity` suffices; `out_len` receives its length either way.
///
/// # Safety
/// `data` must hold the product of `dims` floats, `dims` five sizes, `out`
/// `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn nip_pool_orbit(
    data: *const f32,
    dims: *const usize,
    sequence: *const c_char,
    out: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> NipStatus {
    guard(|| {
        let d = slice_arg(dims, 5, "dims")?;
        let shape = OrbitShape::new(d[0], d[1], d[2], d[3], d[4]);
        let n = d
            .iter()
            .try_fold(1usize, |acc, &x| acc.checked_mul(x))
            .ok_or_else(|| fail(NipStatus::Shape, "orbit shape overflows"))?;
        let values = slice_arg(data, n, "data")?.to_vec();
        let seq: PoolSequence = str_arg(sequence, "sequence")?.parse()?;
        let orbit = OrbitTensor::new("orbit", shape, values)?;
        orbit.validate()?;
        let desc = nip_descriptor(&orbit, &seq)?;
        write_out(&desc.values, out, capacity, out_len)
    })
}

/// Opens an orbit store file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn nip_store_open(path: *const c_char, out: *mut *mut NipStore) -> NipStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        *slot = ptr::null_mut();
        let store = OrbitStore::open(path_arg(path)?).map_err(|e| e.context(path_display(path)))?;
        *slot = Box::into_raw(Box::new(NipStore(store)));
        Ok(())
    })
}

/// # Safety
/// `store` must come from [`nip_store_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nip_store_free(store: *mut NipStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of images in the store, 0 for NULL.
///
/// # Safety
/// `store` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nip_store_len(store: *const NipStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

/// Pools the orbit of `image_id` like [`nip_pool_orbit`]; `l2_normalize`
/// rescales the result to unit length.
///
/// # Safety
/// `store` must be a live handle, strings NUL-terminated, `out` `capacity`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn nip_store_pool(
    store: *const NipStore,
    image_id: *const c_char,
    sequence: *const c_char,
    l2_normalize: bool,
    out: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> NipStatus {
    guard(|| {
        let store = ref_arg(store, "store")?;
        let id = str_arg(image_id, "image_id")?;
        let seq: PoolSequence = str_arg(sequence, "sequence")?.parse()?;
        let mut desc = nip_descriptor(&store.0.read_orbit(id)?, &seq)?;
        if l2_normalize {
            desc = nip_core::postproc::l2_normalize(&desc);
        }
        write_out(&desc.values, out, capacity, out_len)
    })
}

/// Loads a hash model written by `nip fit-hash`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn nip_hasher_open(
    path: *const c_char,
    out: *mut *mut NipHasher,
) -> NipStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        *slot = ptr::null_mut();
        let (hasher, _) =
            FittedHasher::read(path_arg(path)?).map_err(|e| e.context(path_display(path)))?;
        *slot = Box::into_raw(Box::new(NipHasher(hasher)));
        Ok(())
    })
}

/// # Safety
/// `hasher` must come from [`nip_hasher_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nip_hasher_free(hasher: *mut NipHasher) {
    if !hasher.is_null() {
        drop(Box::from_raw(hasher));
    }
}

/// Descriptor length the model expects, 0 for NULL.
///
/// # Safety
/// `hasher` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nip_hasher_input_dim(hasher: *const NipHasher) -> usize {
    hasher.as_ref().map_or(0, |h| h.0.input_dim())
}

/// Code length in bits, 0 for NULL.
///
/// # Safety
/// `hasher` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nip_hasher_n_bits(hasher: *const NipHasher) -> usize {
    hasher.as_ref().map_or(0, |h| h.0.n_bits())
}

/// Hashes one descriptor into `ceil(n_bits / 8)` bytes, bit `j` at
/// `out[j / 8] >> (j % 8)`.
///
/// # Safety
/// `hasher` must be a live handle, `values` `len` doubles, `out` `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn nip_hasher_hash(
    hasher: *const NipHasher,
    values: *const f64,
    len: usize,
    out: *mut u8,
    capacity: usize,
    out_len: *mut usize,
) -> NipStatus {
    guard(|| {
        let hasher = ref_arg(hasher, "hasher")?;
        let desc = Descriptor::from_values("query", slice_arg(values, len, "values")?.to_vec())?;
        let code = hasher.0.hash(&desc)?;
        write_out(code.packed(), out, capacity, out_len)
    })
}

/// Hamming distance between two packed codes of `len` bytes.
///
/// # Safety
/// `a` and `b` must each point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn nip_hamming(
    a: *const u8,
    b: *const u8,
    len: usize,
    out: *mut u32,
) -> NipStatus {
    guard(|| {
        let a = slice_arg(a, len, "a")?;
        let b = slice_arg(b, len, "b")?;
        *out_arg(out, "out")? = hamming_packed(a, b);
        Ok(())
    })
}

/// Loads a hash code file written by `nip hash` as a search index.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn nip_index_open(path: *const c_char, out: *mut *mut NipIndex) -> NipStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        *slot = ptr::null_mut();
        let codes = HashCodes::read(path_arg(path)?).map_err(|e| e.context(path_display(path)))?;
        let index = HashIndex::from_codes(&codes)?;
        let ids = index
            .ids()
            .iter()
            .map(|id| {
                CString::new(id.as_str())
                    .map_err(|_| fail(NipStatus::Corrupt, "image id contains NUL"))
            })
            .collect::<Result<_, _>>()?;
        *slot = Box::into_raw(Box::new(NipIndex { index, ids }));
        Ok(())
    })
}

/// # Safety
/// `index` must come from [`nip_index_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nip_index_free(index: *mut NipIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of codes, 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nip_index_len(index: *const NipIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// Code length in bits, 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nip_index_n_bits(index: *const NipIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.n_bits())
}

/// Image id at database position `pos`, or NULL when out of range. Owned by
/// the index.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nip_index_id(index: *const NipIndex, pos: usize) -> *const c_char {
    index
        .as_ref()
        .and_then(|i| i.ids.get(pos))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Ranks the whole database against a packed query code by ascending
/// Hamming distance, ties by ascending image id. `exclude_id` (may be NULL)
/// is left out of the ranking. Database positions go to `positions` and
/// distances to `distances` (may be NULL); `out_len` receives the ranking
/// length.
///
/// # Safety
/// `index` must be a live handle, `query` `query_len` bytes, and both output
/// arrays `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn nip_index_rank(
    index: *const NipIndex,
    query: *const u8,
    query_len: usize,
    exclude_id: *const c_char,
    positions: *mut u32,
    distances: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> NipStatus {
    guard(|| {
        let index = &ref_arg(index, "index")?.index;
        let query = slice_arg(query, query_len, "query")?;
        let exclude = if exclude_id.is_null() {
            None
        } else {
            Some(str_arg(exclude_id, "exclude_id")?)
        };
        let ranked = index.rank_packed("query", query, exclude)?;
        let pos: Vec<u32> = ranked
            .entries
            .iter()
            .map(|e| index.position(&e.image_id).expect("ranked id is indexed") as u32)
            .collect();
        write_out(&pos, positions, capacity, out_len)?;
        if !distances.is_null() {
            for (k, e) in ranked.entries.iter().enumerate() {
                *distances.add(k) = e.distance as u32;
            }
        }
        Ok(())
    })
}
