//! C ABI over the `ncdl` engine.
//!
//! Every fallible function returns an [`NcdlStatus`]; on failure the message
//! is available from [`ncdl_last_error`] on the same thread. Datasets and
//! models are opaque handles released with their `_free` function.
//! Matrices are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{ArrayView2, ArrayViewMut2};
use ncdl::checkpoint::Checkpoint;
use ncdl::data::{BBox, FeatureDataset};
use ncdl::evalkit::{hungarian, iou};
use ncdl::inference::class_probabilities;
use ncdl::priors::{lognormal_prior, PriorMarginals};
use ncdl::pseudolabel::{sinkhorn_labels, SinkhornConfig};
use ncdl::NcdlError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NcdlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    Config = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 99,
}

/// Feature dataset loaded from an RFD1 directory.
pub struct NcdlDataset {
    inner: FeatureDataset,
}

/// Trained heads loaded from a checkpoint directory.
pub struct NcdlModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &NcdlError) -> NcdlStatus {
    match e {
        NcdlError::Io { .. } => NcdlStatus::Io,
        NcdlError::Json { .. } | NcdlError::UnsupportedVersion { .. } | NcdlError::SizeMismatch { .. } => {
            NcdlStatus::Format
        }
        NcdlError::Shape(_) => NcdlStatus::Shape,
        NcdlError::NonFinite(_) | NcdlError::NonFiniteLoss { .. } => NcdlStatus::NonFinite,
        NcdlError::Config { .. } => NcdlStatus::Config,
        _ => NcdlStatus::InvalidArgument,
    }
}

struct Fail(NcdlStatus, String);

impl From<NcdlError> for Fail {
    fn from(e: NcdlError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NcdlStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(NcdlStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure and converts panics to `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NcdlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NcdlStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            NcdlStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn matrix<'a>(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<ArrayView2<'a, f64>, Fail> {
    let len = rows.checked_mul(cols).ok_or_else(|| invalid(format!("{what} size overflows")))?;
    if len == 0 {
        return Ok(ArrayView2::from_shape((rows, cols), &[]).expect("empty view"));
    }
    if data.is_null() {
        return Err(null(what));
    }
    let s = std::slice::from_raw_parts(data, len);
    Ok(ArrayView2::from_shape((rows, cols), s).expect("length matches shape"))
}

unsafe fn out_slice<'a>(data: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(data, len))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next `ncdl_*` call on the same thread.
#[no_mangle]
pub extern "C" fn ncdl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn ncdl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an RFD1 dataset directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncdl_dataset_open(path: *const c_char, out: *mut *mut NcdlDataset) -> NcdlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let inner = ncdl::dataio::read_dataset(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(NcdlDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`ncdl_dataset_open`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ncdl_dataset_free(ds: *mut NcdlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Proposal rows; 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ncdl_dataset_num_rows(ds: *const NcdlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ncdl_dataset_feature_dim(ds: *const NcdlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.feature_dim())
}

/// Copies view-1 features of every row into `out` (`num_rows × feature_dim`).
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ncdl_dataset_features(ds: *const NcdlDataset, out: *mut f64, out_len: usize) -> NcdlStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("dataset"))?.inner;
        let need = ds.len() * ds.feature_dim();
        if out_len != need {
            return Err(invalid(format!("output holds {out_len} values, need {need}")));
        }
        let out = out_slice(out, out_len, "out")?;
        for (o, v) in out.iter_mut().zip(ds.view1.iter()) {
            *o = f64::from(*v);
        }
        Ok(())
    })
}

/// Loads a discovery checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncdl_model_load(path: *const c_char, out: *mut *mut NcdlModel) -> NcdlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let inner = Checkpoint::load(&path_arg(path)?)?;
        if inner.params.novel_heads.is_empty() {
            return Err(invalid("checkpoint has no novel head; run discovery first"));
        }
        *out = Box::into_raw(Box::new(NcdlModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ncdl_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ncdl_model_free(model: *mut NcdlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Known + novel slots of the primary head; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ncdl_model_num_classes(model: *const NcdlModel) -> usize {
    model.as_ref().map_or(0, |m| {
        let p = &m.inner.params;
        p.num_known() + p.primary().num_novel()
    })
}

/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ncdl_model_feature_dim(model: *const NcdlModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.params.known_weights.ncols())
}

/// Class probabilities for `rows` feature vectors; `out` receives
/// `rows × ncdl_model_num_classes` values.
///
/// # Safety
/// `features` must hold `rows * dim` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ncdl_model_predict(
    model: *const NcdlModel,
    features: *const f64,
    rows: usize,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> NcdlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let need = rows * ncdl_model_num_classes(m);
        if out_len != need {
            return Err(invalid(format!("output holds {out_len} values, need {need}")));
        }
        let x = matrix(features, rows, dim, "features")?;
        let probs = class_probabilities(&m.inner.params, x)?;
        let out = out_slice(out, out_len, "out")?;
        ArrayViewMut2::from_shape(probs.dim(), out).expect("length checked").assign(&probs);
        Ok(())
    })
}

/// Log-normal prior masses for `num_classes` classes summing to `total_mass`.
///
/// # Safety
/// `out` must hold `num_classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn ncdl_lognormal_prior(
    num_classes: usize,
    total_mass: f64,
    mu: f64,
    sigma: f64,
    out: *mut f64,
) -> NcdlStatus {
    guard(|| {
        let prior = lognormal_prior(num_classes, total_mass, mu, sigma)?;
        out_slice(out, num_classes, "out")?.copy_from_slice(&prior.masses);
        Ok(())
    })
}

/// Balanced pseudo-labels for a `rows × cols` logit matrix. `prior` holds
/// `cols` masses summing to `rows`; `out` receives `rows × cols` values.
///
/// # Safety
/// `logits` and `out` must hold `rows * cols` doubles, `prior` `cols`.
#[no_mangle]
pub unsafe extern "C" fn ncdl_sinkhorn(
    logits: *const f64,
    rows: usize,
    cols: usize,
    prior: *const f64,
    lambda: f64,
    num_iters: usize,
    out: *mut f64,
) -> NcdlStatus {
    guard(|| {
        let x = matrix(logits, rows, cols, "logits")?;
        let masses = matrix(prior, 1, cols, "prior")?.row(0).to_vec();
        let total_mass = masses.iter().sum();
        let prior = PriorMarginals { masses, total_mass };
        let cfg = SinkhornConfig {
            lambda,
            num_iters,
            log_domain: true,
        };
        cfg.validate()?;
        let q = sinkhorn_labels(x, &prior, &cfg)?;
        let out = out_slice(out, rows * cols, "out")?;
        let mut view = ArrayViewMut2::from_shape((rows, cols), out).expect("length matches shape");
        view.assign(&q);
        Ok(())
    })
}

/// Minimum-cost assignment on a `rows × cols` matrix. `out_cols[i]` gets the
/// column assigned to row `i`, or -1; `out_total` the summed cost.
///
/// # Safety
/// `cost` must hold `rows * cols` doubles and `out_cols` `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn ncdl_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    out_cols: *mut i64,
    out_total: *mut f64,
) -> NcdlStatus {
    guard(|| {
        let c = matrix(cost, rows, cols, "cost")?;
        let a = hungarian(c)?;
        if rows > 0 {
            if out_cols.is_null() {
                return Err(null("out_cols"));
            }
            let cols_out = std::slice::from_raw_parts_mut(out_cols, rows);
            cols_out.fill(-1);
            for (i, j) in a.pairs {
                cols_out[i] = j as i64;
            }
        }
        if !out_total.is_null() {
            *out_total = a.total_cost;
        }
        Ok(())
    })
}

/// IoU of two `[x1, y1, x2, y2]` boxes; NaN if either pointer is null.
///
/// # Safety
/// `a` and `b` must each hold 4 doubles or be null.
#[no_mangle]
pub unsafe extern "C" fn ncdl_iou(a: *const f64, b: *const f64) -> f64 {
    if a.is_null() || b.is_null() {
        return f64::NAN;
    }
    let (a, b) = (std::slice::from_raw_parts(a, 4), std::slice::from_raw_parts(b, 4));
    iou(&BBox::new(a[0], a[1], a[2], a[3]), &BBox::new(b[0], b[1], b[2], b[3]))
}
