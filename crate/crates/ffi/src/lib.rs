//! C ABI over `hers-core`.
//!
//! Every fallible function returns a [`HersStatus`]; on failure the message is
//! available from [`hers_last_error`] on the same thread. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.
//! Output pointers are written only on success.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hers_core::experts::{merge_experts, ExpertSet, MERGED_LABEL};
use hers_core::linalg::gaussian_fit;
use hers_core::metrics::{fid, kl_gaussian};
use hers_core::pipeline::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hers_core::pipeline::{run_all, PipelineConfig};
use hers_core::promptbank::{embed_prompt, rouge_l, tokenize, EMBED_DIM};
use hers_core::{Error, GaussianStats, Matrix};

/// Length of the buffer [`hers_embed_prompt`] fills.
pub const HERS_EMBED_DIM: usize = 64;
const _: () = assert!(HERS_EMBED_DIM == EMBED_DIM);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HersStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Numerical = 4,
    Io = 5,
    Checkpoint = 6,
    Stage = 7,
    Panic = 8,
}

/// Mean and covariance of a feature distribution.
pub struct HersGaussian(GaussianStats);

/// A base model with labeled adapter sets.
pub struct HersCheckpoint(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<Vec<u8>>) {
    let mut bytes = msg.into();
    bytes.retain(|&b| b != 0);
    let msg = CString::new(bytes).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> HersStatus {
    match err {
        Error::NotPsd { .. } | Error::Singular { .. } | Error::NoConvergence { .. } => HersStatus::Numerical,
        Error::Io { .. } => HersStatus::Io,
        Error::Checkpoint { .. } | Error::Json(_) => HersStatus::Checkpoint,
        Error::Stage { .. } => HersStatus::Stage,
        _ => HersStatus::InvalidArgument,
    }
}

struct Failure(HersStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(HersStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HersStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HersStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            HersStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` is null or a NUL-terminated string valid for the call.
unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|e| Failure(HersStatus::InvalidUtf8, format!("`{what}` is not UTF-8: {e}")))
}

/// # Safety
/// `ptr` is null or valid for `len` reads.
unsafe fn slice_arg<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` is null or points to a live handle.
unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

fn out_arg<T>(ptr: *mut T, what: &str) -> Result<*mut T, Failure> {
    if ptr.is_null() {
        Err(null(what))
    } else {
        Ok(ptr)
    }
}

/// Message of the last failure on this thread, or `""`. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hers_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hers_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Token-level ROUGE-L F1 between two texts after tokenization.
///
/// # Safety
/// `a` and `b` are NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hers_rouge_l(a: *const c_char, b: *const c_char, out: *mut f64) -> HersStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (a, b) = (tokenize(str_arg(a, "a")?), tokenize(str_arg(b, "b")?));
        *out = rouge_l(&a, &b);
        Ok(())
    })
}

/// Writes the unit-norm trigram embedding of `text` into `out`, which must
/// hold exactly `HERS_EMBED_DIM` values.
///
/// # Safety
/// `text` is a NUL-terminated string; `out` is writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn hers_embed_prompt(text: *const c_char, out: *mut f64, len: usize) -> HersStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if len != HERS_EMBED_DIM {
            return Err(Failure(HersStatus::InvalidArgument, format!("buffer holds {len} values, need {HERS_EMBED_DIM}")));
        }
        let v = embed_prompt(&tokenize(str_arg(text, "text")?));
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&v);
        Ok(())
    })
}

/// Builds a Gaussian from a mean of length `dim` and a row-major `dim × dim`
/// PSD covariance.
///
/// # Safety
/// `mean` holds `dim` values, `cov` holds `dim·dim`; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hers_gaussian_new(mean: *const f64, cov: *const f64, dim: usize, out: *mut *mut HersGaussian) -> HersStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mean = slice_arg(mean, dim, "mean")?.to_vec();
        let cov = Matrix::new(dim, dim, slice_arg(cov, dim * dim, "cov")?.to_vec())?;
        *out = Box::into_raw(Box::new(HersGaussian(GaussianStats::new(mean, cov)?)));
        Ok(())
    })
}

/// Fits mean and unbiased covariance to `rows` samples of width `cols`
/// stored row-major.
///
/// # Safety
/// `samples` holds `rows·cols` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hers_gaussian_fit(samples: *const f64, rows: usize, cols: usize, out: *mut *mut HersGaussian) -> HersStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let n = rows.checked_mul(cols).ok_or_else(|| Failure(HersStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let m = Matrix::new(rows, cols, slice_arg(samples, n, "samples")?.to_vec())?;
        *out = Box::into_raw(Box::new(HersGaussian(gaussian_fit(&m)?)));
        Ok(())
    })
}

/// Releases a Gaussian; null is ignored.
///
/// # Safety
/// `g` is null or came from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hers_gaussian_free(g: *mut HersGaussian) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Dimension of a Gaussian, or 0 for null.
///
/// # Safety
/// `g` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hers_gaussian_dim(g: *const HersGaussian) -> usize {
    g.as_ref().map_or(0, |g| g.0.dim())
}

/// Fréchet distance between two Gaussians.
///
/// # Safety
/// `real` and `gen` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hers_fid(real: *const HersGaussian, gen: *const HersGaussian, out: *mut f64) -> HersStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = fid(&handle(real, "real")?.0, &handle(gen, "gen")?.0)?;
        Ok(())
    })
}

/// `KL(p ‖ q)`; `q` must be positive definite.
///
/// # Safety
/// `p` and `q` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hers_kl_gaussian(p: *const HersGaussian, q: *const HersGaussian, out: *mut f64) -> HersStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = kl_gaussian(&handle(p, "p")?.0, &handle(q, "q")?.0)?;
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hers_checkpoint_load(path: *const c_char, out: *mut *mut HersCheckpoint) -> HersStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ckpt = load_checkpoint(&PathBuf::from(str_arg(path, "path")?), None)?;
        *out = Box::into_raw(Box::new(HersCheckpoint(ckpt)));
        Ok(())
    })
}

/// Atomically writes a checkpoint file.
///
/// # Safety
/// `ckpt` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hers_checkpoint_save(ckpt: *const HersCheckpoint, path: *const c_char) -> HersStatus {
    guard(|| {
        let ckpt = handle(ckpt, "ckpt")?;
        save_checkpoint(&PathBuf::from(str_arg(path, "path")?), &ckpt.0)?;
        Ok(())
    })
}

/// Releases a checkpoint; null is ignored.
///
/// # Safety
/// `ckpt` is null or came from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hers_checkpoint_free(ckpt: *mut HersCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Number of labeled adapter sets, or 0 for null.
///
/// # Safety
/// `ckpt` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hers_checkpoint_adapter_sets(ckpt: *const HersCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.0.adapters.len())
}

/// Merges every adapter set except `merged` factor-wise and stores the
/// result under the `merged` label, replacing any previous merge.
///
/// # Safety
/// `ckpt` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn hers_checkpoint_merge(ckpt: *mut HersCheckpoint) -> HersStatus {
    guard(|| {
        let ckpt = &mut ckpt.as_mut().ok_or_else(|| null("ckpt"))?.0;
        let experts: BTreeMap<String, _> =
            ckpt.adapters.iter().filter(|(label, _)| label.as_str() != MERGED_LABEL).map(|(label, ads)| (label.clone(), ads.clone())).collect();
        if experts.is_empty() {
            return Err(Failure(HersStatus::InvalidArgument, "checkpoint has no expert adapters to merge".into()));
        }
        let merged = merge_experts(&ExpertSet::new(ckpt.base.clone(), experts)?)?;
        ckpt.adapters.insert(MERGED_LABEL.to_string(), merged);
        Ok(())
    })
}

/// Runs every pipeline stage into `out_dir`. A null `config_path` uses the
/// default configuration.
///
/// # Safety
/// `config_path` is null or a NUL-terminated string; `out_dir` is one.
#[no_mangle]
pub unsafe extern "C" fn hers_run_all(config_path: *const c_char, out_dir: *const c_char) -> HersStatus {
    guard(|| {
        let cfg = if config_path.is_null() { PipelineConfig::default() } else { PipelineConfig::load(&PathBuf::from(str_arg(config_path, "config_path")?))? };
        run_all(&cfg, &PathBuf::from(str_arg(out_dir, "out_dir")?))?;
        Ok(())
    })
}
