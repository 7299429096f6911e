//! C ABI for `hfd`.
//!
//! Every fallible call returns an [`HfdStatus`]; on failure the message is
//! available from [`hfd_last_error_message`] on the same thread. Forests are
//! opaque handles released with [`hfd_forest_free`]. Feature rows are
//! row-major `double` arrays in the caller's raw (unnormalized) units.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use hfd::ann::{AnnIndex, AnnParams, NeighborList, Query};
use hfd::data::{normalize, ConstraintSet, Dataset};
use hfd::eval::{derive_seed, ConstraintConfig};
use hfd::hierarchy::{train_forest, Forest, ForestParams, TreeParams};
use hfd::HfdError;

/// Opaque trained forest.
pub struct HfdForest {
    forest: Forest,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    UnsupportedVersion = 5,
    DimensionMismatch = 6,
    InsufficientCandidates = 7,
    Unlabeled = 8,
    Training = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfdSearchMode {
    Approx = 0,
    Brute = 1,
}

/// Training options; start from [`hfd_train_params_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HfdTrainParams {
    pub n_trees: usize,
    pub seed: u64,
    pub min_node_size: usize,
    /// Features per node; 0 selects the default.
    pub d_k: usize,
    pub alpha: f64,
    /// Non-zero: z-score features before training.
    pub normalize: u8,
    /// Constraints sampled per class when labels are given without pairs.
    pub constraints_per_class: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &HfdError) -> HfdStatus {
    match e {
        HfdError::Io { .. } => HfdStatus::Io,
        HfdError::Parse { .. } | HfdError::Json(_) => HfdStatus::Parse,
        HfdError::UnsupportedVersion { .. } => HfdStatus::UnsupportedVersion,
        HfdError::DimensionMismatch { .. } => HfdStatus::DimensionMismatch,
        HfdError::InsufficientCandidates { .. } => HfdStatus::InsufficientCandidates,
        HfdError::UnlabeledData => HfdStatus::Unlabeled,
        HfdError::NumericalFailure(_)
        | HfdError::NonFinite
        | HfdError::DegenerateSplit { .. }
        | HfdError::TooFewPoints { .. }
        | HfdError::EmptyCannotLink => HfdStatus::Training,
        _ => HfdStatus::InvalidArgument,
    }
}

fn fail(e: HfdError) -> HfdStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn invalid(msg: &str) -> HfdStatus {
    set_error(msg);
    HfdStatus::InvalidArgument
}

fn null(what: &str) -> HfdStatus {
    set_error(format!("{what} is null"));
    HfdStatus::NullPointer
}

/// Runs `f`, converting panics into [`HfdStatus::Panic`].
fn guard(f: impl FnOnce() -> HfdStatus) -> HfdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == HfdStatus::Ok {
                set_error("");
            }
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            HfdStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, HfdStatus> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))
}

unsafe fn forest_ref<'a>(f: *const HfdForest) -> Result<&'a Forest, HfdStatus> {
    f.as_ref().map(|h| &h.forest).ok_or_else(|| null("forest"))
}

unsafe fn row_arg<'a>(x: *const f64, len: usize, forest: &Forest) -> Result<&'a [f64], HfdStatus> {
    if x.is_null() {
        return Err(null("row"));
    }
    if len != forest.dim() {
        return Err(fail(HfdError::DimensionMismatch {
            expected: forest.dim(),
            got: len,
        }));
    }
    Ok(slice::from_raw_parts(x, len))
}

fn into_handle(forest: Forest, out: *mut *mut HfdForest) -> HfdStatus {
    unsafe { *out = Box::into_raw(Box::new(HfdForest { forest })) };
    HfdStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Defaults: 500 trees, seed 0, `min_node_size` 5, default `d_k`,
/// `alpha` 0.5, normalization on, 1000 constraints per class.
#[no_mangle]
pub extern "C" fn hfd_train_params_default() -> HfdTrainParams {
    let f = ForestParams::default();
    HfdTrainParams {
        n_trees: f.n_trees,
        seed: f.seed,
        min_node_size: f.tree.min_node_size,
        d_k: 0,
        alpha: f.alpha,
        normalize: 1,
        constraints_per_class: ConstraintConfig::default().per_class,
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hfd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Trains a forest on `n × d` row-major `points`.
///
/// Constraints come from the `n_must_link` / `n_cannot_link` index pairs
/// (flattened `i, j, i, j, ...`) when either count is non-zero; otherwise
/// they are sampled from `labels` (which may then not be null). With no
/// labels and no pairs every split is unsupervised.
///
/// # Safety
/// All non-null pointers must reference arrays of the stated sizes; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_train(
    points: *const f64,
    n: usize,
    d: usize,
    labels: *const i64,
    must_link: *const usize,
    n_must_link: usize,
    cannot_link: *const usize,
    n_cannot_link: usize,
    params: *const HfdTrainParams,
    out: *mut *mut HfdForest,
) -> HfdStatus {
    guard(|| {
        if points.is_null() {
            return null("points");
        }
        if out.is_null() {
            return null("out");
        }
        let p = match params.as_ref() {
            Some(p) => *p,
            None => hfd_train_params_default(),
        };
        if n == 0 || d == 0 {
            return invalid("n and d must be positive");
        }
        let Some(total) = n.checked_mul(d) else {
            return invalid("n * d overflows");
        };
        let flat = slice::from_raw_parts(points, total);
        let rows: Vec<Vec<f64>> = flat.chunks(d).map(<[f64]>::to_vec).collect();
        let labels = (!labels.is_null()).then(|| slice::from_raw_parts(labels, n).to_vec());
        let raw = tri!(Dataset::from_rows(rows, labels.clone()).map_err(fail));
        let (data, stats) = if p.normalize != 0 {
            normalize(&raw)
        } else {
            let stats = hfd::data::NormStats::identity(d);
            (raw, stats)
        };
        let pairs = |ptr: *const usize, count: usize| -> Result<Vec<(usize, usize)>, HfdStatus> {
            if count == 0 {
                return Ok(Vec::new());
            }
            if ptr.is_null() {
                return Err(null("constraint array"));
            }
            Ok(slice::from_raw_parts(ptr, 2 * count).chunks(2).map(|c| (c[0], c[1])).collect())
        };
        let cons = if n_must_link + n_cannot_link > 0 {
            let ml = tri!(pairs(must_link, n_must_link));
            let cl = tri!(pairs(cannot_link, n_cannot_link));
            tri!(ConstraintSet::new(ml, cl, n).map_err(fail))
        } else if let Some(l) = &labels {
            let cfg = ConstraintConfig {
                per_class: p.constraints_per_class,
                ..ConstraintConfig::default()
            };
            tri!(cfg.sample(l, derive_seed(p.seed, 1)).map_err(fail))
        } else {
            ConstraintSet::default()
        };
        let fp = ForestParams {
            n_trees: p.n_trees,
            alpha: p.alpha,
            seed: p.seed,
            tree: TreeParams {
                d_k: (p.d_k > 0).then_some(p.d_k),
                min_node_size: p.min_node_size,
                ..TreeParams::default()
            },
        };
        let forest = tri!(train_forest(&data, &cons, &fp).map_err(fail));
        into_handle(
            Forest {
                norm_stats: stats,
                ..forest
            },
            out,
        )
    })
}

/// Loads a model file written by `hfd train` or [`hfd_forest_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_load(path: *const c_char, out: *mut *mut HfdForest) -> HfdStatus {
    guard(|| {
        let path = tri!(path_arg(path));
        if out.is_null() {
            return null("out");
        }
        let f = match File::open(path) {
            Ok(f) => f,
            Err(e) => return fail(HfdError::io(path, e)),
        };
        let forest = tri!(Forest::read_json(BufReader::new(f)).map_err(fail));
        into_handle(forest, out)
    })
}

/// Parses a model from `len` bytes of JSON.
///
/// # Safety
/// `json` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_load_json(json: *const u8, len: usize, out: *mut *mut HfdForest) -> HfdStatus {
    guard(|| {
        if json.is_null() {
            return null("json");
        }
        if out.is_null() {
            return null("out");
        }
        let bytes = slice::from_raw_parts(json, len);
        let forest = tri!(Forest::read_json(bytes).map_err(fail));
        into_handle(forest, out)
    })
}

/// # Safety
/// `forest` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_save(forest: *const HfdForest, path: *const c_char) -> HfdStatus {
    guard(|| {
        let forest = tri!(forest_ref(forest));
        let path = tri!(path_arg(path));
        let f = match File::create(path) {
            Ok(f) => f,
            Err(e) => return fail(HfdError::io(path, e)),
        };
        tri!(forest.write_json(BufWriter::new(f)).map_err(fail));
        HfdStatus::Ok
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `forest` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_free(forest: *mut HfdForest) {
    if !forest.is_null() {
        drop(Box::from_raw(forest));
    }
}

/// Training points; 0 for a null handle.
///
/// # Safety
/// `forest` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_n(forest: *const HfdForest) -> usize {
    forest.as_ref().map_or(0, |h| h.forest.n())
}

/// # Safety
/// `forest` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_dim(forest: *const HfdForest) -> usize {
    forest.as_ref().map_or(0, |h| h.forest.dim())
}

/// # Safety
/// `forest` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_n_trees(forest: *const HfdForest) -> usize {
    forest.as_ref().map_or(0, |h| h.forest.n_trees())
}

/// Forest distance between two raw rows of length `d`.
///
/// # Safety
/// `a` and `b` must point to `d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_distance(
    forest: *const HfdForest,
    a: *const f64,
    b: *const f64,
    d: usize,
    out: *mut f64,
) -> HfdStatus {
    guard(|| {
        let forest = tri!(forest_ref(forest));
        let a = tri!(row_arg(a, d, forest));
        let b = tri!(row_arg(b, d, forest));
        if out.is_null() {
            return null("out");
        }
        *out = tri!(hfd::metric::forest_distance(forest, a, b).map_err(fail));
        HfdStatus::Ok
    })
}

#[allow(clippy::too_many_arguments)]
unsafe fn knn_into(
    forest: &Forest,
    query: Query<'_>,
    k: usize,
    k_o: usize,
    mode: HfdSearchMode,
    out_ids: *mut usize,
    out_distances: *mut f64,
    out_len: *mut usize,
) -> HfdStatus {
    if out_ids.is_null() || out_len.is_null() {
        return null("output array");
    }
    let index = tri!(AnnIndex::new(forest).map_err(fail));
    let list: NeighborList = match mode {
        HfdSearchMode::Approx => {
            let p = AnnParams { k_o, k, truncate: false };
            tri!(p.validate().map_err(fail));
            tri!(index.approx_knn(query, &p).map_err(fail))
        }
        HfdSearchMode::Brute => tri!(index.brute_knn(query, k).map_err(fail)),
    };
    for (r, nb) in list.entries.iter().enumerate() {
        *out_ids.add(r) = nb.id;
        if !out_distances.is_null() {
            *out_distances.add(r) = nb.distance;
        }
    }
    *out_len = list.len();
    HfdStatus::Ok
}

/// `k` nearest training points of a raw row, ascending by distance.
/// `out_ids` (and `out_distances` unless null) need room for `k` entries;
/// `out_len` receives the count written.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_knn(
    forest: *const HfdForest,
    query: *const f64,
    d: usize,
    k: usize,
    k_o: usize,
    mode: HfdSearchMode,
    out_ids: *mut usize,
    out_distances: *mut f64,
    out_len: *mut usize,
) -> HfdStatus {
    guard(|| {
        let forest = tri!(forest_ref(forest));
        let q = tri!(row_arg(query, d, forest));
        knn_into(forest, Query::External(q), k, k_o, mode, out_ids, out_distances, out_len)
    })
}

/// Like [`hfd_forest_knn`] for training point `id`, which is excluded from
/// its own list.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn hfd_forest_knn_training(
    forest: *const HfdForest,
    id: usize,
    k: usize,
    k_o: usize,
    mode: HfdSearchMode,
    out_ids: *mut usize,
    out_distances: *mut f64,
    out_len: *mut usize,
) -> HfdStatus {
    guard(|| {
        let forest = tri!(forest_ref(forest));
        if id >= forest.n() {
            return invalid("training id out of range");
        }
        knn_into(forest, Query::Training(id), k, k_o, mode, out_ids, out_distances, out_len)
    })
}

/// Library version, NUL-terminated, static.
#[no_mangle]
pub extern "C" fn hfd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
