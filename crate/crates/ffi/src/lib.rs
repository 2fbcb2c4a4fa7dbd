//! C interface: load a trained model, score multi-enrollment trials on
//! embeddings, and compute EER / minDCF.
//!
//! Every function returns an [`EnktStatus`]; on failure the message is kept
//! per thread and can be fetched with [`enkt_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use enkt::backend::{score_trial, Backend, TrialPair};
use enkt::cli::{RunConfig, SavedModel};
use enkt::objectives::{dcf_beta, eer, min_dcf, DcfConfig};
use enkt::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnktStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Compatibility = 5,
    EmptyModel = 6,
    Dimension = 7,
    Numeric = 8,
    Config = 9,
    Panic = 10,
    Other = 11,
}

/// Opaque scoring handle.
pub struct EnktModel {
    backend: Backend,
    dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(EnktStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => EnktStatus::Io,
            Error::Format(_) | Error::Parse { .. } => EnktStatus::Format,
            Error::Compatibility(_) => EnktStatus::Compatibility,
            Error::EmptyModel => EnktStatus::EmptyModel,
            Error::Dimension { .. } => EnktStatus::Dimension,
            Error::Domain { .. }
            | Error::NonFinite { .. }
            | Error::Decomposition(_)
            | Error::Symmetry(_)
            | Error::Divergence(_) => EnktStatus::Numeric,
            Error::Config(_) => EnktStatus::Config,
            Error::Contract(_) | Error::EmptyInput(_) => EnktStatus::InvalidArgument,
            _ => EnktStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(EnktStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EnktStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EnktStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EnktStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure(EnktStatus::NullPointer, format!("{what} is null")));
    }
    Ok(())
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    non_null(p, what)?;
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

/// `n` labels, each 0 or 1.
unsafe fn labels_arg(labels: *const u8, n: usize) -> Result<Vec<bool>, Failure> {
    non_null(labels, "labels")?;
    unsafe { std::slice::from_raw_parts(labels, n) }
        .iter()
        .map(|&y| match y {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(invalid(format!("label {v} is not 0 or 1"))),
        })
        .collect()
}

/// Loads a model container. `config_path` may be null for the default
/// configuration; its `score.backend` key selects the back-end.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn enkt_model_load(
    model_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut EnktModel,
) -> EnktStatus {
    guard(|| {
        non_null(out, "out")?;
        let model_path = unsafe { path_arg(model_path, "model_path") }?;
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(unsafe { path_arg(config_path, "config_path") }?)?
        };
        let saved = SavedModel::load(model_path, &cfg)?;
        let backend = saved.backend(cfg.get("score.backend"))?;
        let dim = cfg.usize("encoder.embedding_dim")?;
        unsafe { *out = Box::into_raw(Box::new(EnktModel { backend, dim })) };
        Ok(())
    })
}

/// Releases a handle from [`enkt_model_load`]; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle, not freed before.
#[no_mangle]
pub unsafe extern "C" fn enkt_model_free(model: *mut EnktModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Embedding dimension the model scores.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn enkt_model_dim(model: *const EnktModel, out: *mut usize) -> EnktStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        unsafe { *out = (*model).dim };
        Ok(())
    })
}

/// Scores one trial: `k` enrollment embeddings stored row-major in
/// `enroll` (`k × dim`) against `test` (`dim`). The attention back-end
/// writes its calibrated probability, the others their raw score.
///
/// # Safety
/// `enroll` must hold `k·dim` doubles, `test` `dim` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn enkt_score_trial(
    model: *const EnktModel,
    enroll: *const f64,
    k: usize,
    test: *const f64,
    dim: usize,
    out: *mut f64,
) -> EnktStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(enroll, "enroll")?;
        non_null(test, "test")?;
        non_null(out, "out")?;
        let m = unsafe { &*model };
        if k == 0 {
            return Err(invalid("enrollment count is zero"));
        }
        if dim != m.dim {
            return Err(Failure(
                EnktStatus::Dimension,
                format!("embedding dim {dim}, model expects {}", m.dim),
            ));
        }
        let e = unsafe { std::slice::from_raw_parts(enroll, k * dim) };
        let t = unsafe { std::slice::from_raw_parts(test, dim) };
        let rows: Vec<&[f64]> = e.chunks_exact(dim).collect();
        let trial = TrialPair {
            enroll: (0..k).map(|i| i.to_string()).collect(),
            test: String::from("test"),
            target: false,
        };
        let s = score_trial(&m.backend, &trial, &rows, t)?.score();
        unsafe { *out = s };
        Ok(())
    })
}

/// Equal error rate (a fraction) of `n` scores with 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn enkt_eer(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> EnktStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(out, "out")?;
        let y = unsafe { labels_arg(labels, n) }?;
        let s = unsafe { std::slice::from_raw_parts(scores, n) };
        unsafe { *out = eer(s, &y)? };
        Ok(())
    })
}

/// Normalized minimum detection cost at `p_target` with costs `c_miss`, `c_fa`.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn enkt_min_dcf(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
    out: *mut f64,
) -> EnktStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(out, "out")?;
        let y = unsafe { labels_arg(labels, n) }?;
        let s = unsafe { std::slice::from_raw_parts(scores, n) };
        let beta = dcf_beta(&DcfConfig {
            c_miss,
            c_fa,
            p_target,
            ..DcfConfig::default()
        })?;
        unsafe { *out = min_dcf(s, &y, beta)? };
        Ok(())
    })
}

/// Copies this thread's last error message into `buf` (truncated,
/// NUL-terminated) and returns its full length in bytes, 0 if none.
///
/// # Safety
/// `buf` must be null or hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn enkt_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}
