//! C interface to the otcl engine.
//!
//! Objects are exposed as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible function
//! returns an [`OtclStatus`]; the message of the last failure on the calling
//! thread is available through [`otcl_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use otcl::checkpoint::Checkpoint;
use otcl::harness::{predict_batch, run_experiment, Experiment, Learner, RunConfig};
use otcl::numerics::Tensor;
use otcl::oracle::{sinkhorn_distance, DiscreteMeasure};
use otcl::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtclStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    Io = 6,
    Checkpoint = 7,
    /// A caller-supplied buffer was too small.
    BufferTooSmall = 8,
    /// An unexpected internal failure (including a caught panic).
    Internal = 9,
}

impl From<&Error> for OtclStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidLearningRate(_) => OtclStatus::Config,
            Error::Idx(_) | Error::Data(_) | Error::Shape(_) | Error::NoMixtures => OtclStatus::Data,
            Error::NonFinite(_) | Error::SinkhornNotConverged { .. } => OtclStatus::Numerical,
            Error::Io(_) => OtclStatus::Io,
            Error::Checkpoint(_) => OtclStatus::Checkpoint,
            _ => OtclStatus::Internal,
        }
    }
}

/// A run configuration.
pub struct OtclConfig {
    inner: RunConfig,
}

/// A trained learner loaded from a checkpoint.
pub struct OtclLearner {
    inner: Learner,
}

/// The outcome of a finished experiment.
pub struct OtclExperiment {
    inner: Experiment,
    summary_json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: OtclStatus, msg: impl Into<String>) -> OtclStatus {
    set_error(msg);
    status
}

fn fail_with(e: &Error) -> OtclStatus {
    fail(OtclStatus::from(e), e.to_string())
}

/// Runs `f`, turning a panic into [`OtclStatus::Internal`].
fn guard(f: impl FnOnce() -> OtclStatus) -> OtclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(OtclStatus::Internal, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, OtclStatus> {
    if p.is_null() {
        return Err(fail(OtclStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(OtclStatus::InvalidUtf8, "string argument is not UTF-8"))
}

/// Copies `s` and its terminating NUL into `buf` when it fits. `needed`
/// (optional) receives the required size in bytes, NUL included.
unsafe fn copy_out(s: &CStr, buf: *mut c_char, len: usize, needed: *mut usize) -> OtclStatus {
    let bytes = s.to_bytes_with_nul();
    if !needed.is_null() {
        *needed = bytes.len();
    }
    if buf.is_null() || len < bytes.len() {
        return fail(OtclStatus::BufferTooSmall, format!("buffer of {len} bytes, {} needed", bytes.len()));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
    OtclStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn otcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf`.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null; `needed` must be null or
/// point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn otcl_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> OtclStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone()).unwrap_or_default();
    copy_out(&msg, buf, len, needed)
}

/// Creates a configuration holding the defaults.
///
/// # Safety
/// `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn otcl_config_new(out: *mut *mut OtclConfig) -> OtclStatus {
    guard(|| {
        if out.is_null() {
            return fail(OtclStatus::NullPointer, "null output pointer");
        }
        *out = Box::into_raw(Box::new(OtclConfig {
            inner: RunConfig::default(),
        }));
        OtclStatus::Ok
    })
}

/// Parses a TOML configuration; missing fields take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must point to writable
/// memory.
#[no_mangle]
pub unsafe extern "C" fn otcl_config_from_toml(toml: *const c_char, out: *mut *mut OtclConfig) -> OtclStatus {
    guard(|| {
        if out.is_null() {
            return fail(OtclStatus::NullPointer, "null output pointer");
        }
        let text = match str_arg(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match RunConfig::from_toml_str(text).and_then(|c| c.validate().map(|_| c)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(OtclConfig { inner }));
                OtclStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Writes the configuration as TOML into `buf`.
///
/// # Safety
/// `cfg` must be a live handle; `buf` must be valid for `len` bytes or null;
/// `needed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn otcl_config_to_toml(
    cfg: *const OtclConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> OtclStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(OtclStatus::NullPointer, "null config");
        };
        match cfg.inner.to_toml_string() {
            Ok(s) => match CString::new(s) {
                Ok(c) => copy_out(&c, buf, len, needed),
                Err(_) => fail(OtclStatus::Internal, "config text contains NUL"),
            },
            Err(e) => fail_with(&e),
        }
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn otcl_config_free(cfg: *mut OtclConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Loads the configured dataset and runs every seed.
///
/// # Safety
/// `cfg` must be a live handle; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn otcl_experiment_run(cfg: *const OtclConfig, out: *mut *mut OtclExperiment) -> OtclStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(OtclStatus::NullPointer, "null config");
        };
        if out.is_null() {
            return fail(OtclStatus::NullPointer, "null output pointer");
        }
        let exp = match run_experiment(&cfg.inner) {
            Ok(e) => e,
            Err(e) => return fail_with(&e),
        };
        let json = match serde_json::to_string(&exp.summary) {
            Ok(j) => j,
            Err(e) => return fail(OtclStatus::Internal, e.to_string()),
        };
        let Ok(summary_json) = CString::new(json) else {
            return fail(OtclStatus::Internal, "summary contains NUL");
        };
        *out = Box::into_raw(Box::new(OtclExperiment {
            inner: exp,
            summary_json,
        }));
        OtclStatus::Ok
    })
}

/// Mean over seeds of the final average accuracy.
///
/// # Safety
/// `exp` must be a live handle; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn otcl_experiment_mean_accuracy(exp: *const OtclExperiment, out: *mut f64) -> OtclStatus {
    guard(|| {
        let (Some(exp), false) = (exp.as_ref(), out.is_null()) else {
            return fail(OtclStatus::NullPointer, "null argument");
        };
        match exp.inner.summary.mean_avg_accuracy {
            Some(a) => {
                *out = a;
                OtclStatus::Ok
            }
            None => fail(OtclStatus::Data, "no completed seed"),
        }
    })
}

/// Mean over seeds of the final average forgetting.
///
/// # Safety
/// `exp` must be a live handle; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn otcl_experiment_mean_forgetting(exp: *const OtclExperiment, out: *mut f64) -> OtclStatus {
    guard(|| {
        let (Some(exp), false) = (exp.as_ref(), out.is_null()) else {
            return fail(OtclStatus::NullPointer, "null argument");
        };
        match exp.inner.summary.mean_avg_forgetting {
            Some(f) => {
                *out = f;
                OtclStatus::Ok
            }
            None => fail(OtclStatus::Data, "forgetting needs at least two tasks"),
        }
    })
}

/// Copies the JSON summary of the experiment into `buf`.
///
/// # Safety
/// `exp` must be a live handle; `buf` must be valid for `len` bytes or null;
/// `needed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn otcl_experiment_summary_json(
    exp: *const OtclExperiment,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> OtclStatus {
    guard(|| {
        let Some(exp) = exp.as_ref() else {
            return fail(OtclStatus::NullPointer, "null experiment");
        };
        copy_out(&exp.summary_json, buf, len, needed)
    })
}

/// Takes the learner of the experiment's first seed as a new handle.
///
/// # Safety
/// `exp` must be a live handle; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn otcl_experiment_learner(exp: *const OtclExperiment, out: *mut *mut OtclLearner) -> OtclStatus {
    guard(|| {
        let (Some(exp), false) = (exp.as_ref(), out.is_null()) else {
            return fail(OtclStatus::NullPointer, "null argument");
        };
        match exp.inner.results.first() {
            Some(r) => {
                *out = Box::into_raw(Box::new(OtclLearner {
                    inner: r.learner.clone(),
                }));
                OtclStatus::Ok
            }
            None => fail(OtclStatus::Data, "no completed seed"),
        }
    })
}

/// # Safety
/// `exp` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn otcl_experiment_free(exp: *mut OtclExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Loads a learner from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// memory.
#[no_mangle]
pub unsafe extern "C" fn otcl_learner_load(path: *const c_char, out: *mut *mut OtclLearner) -> OtclStatus {
    guard(|| {
        if out.is_null() {
            return fail(OtclStatus::NullPointer, "null output pointer");
        }
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Checkpoint::load(path) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(OtclLearner { inner: ck.learner }));
                OtclStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// # Safety
/// `learner` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn otcl_learner_free(learner: *mut OtclLearner) {
    if !learner.is_null() {
        drop(Box::from_raw(learner));
    }
}

/// Input and feature dimensions of the learner.
///
/// # Safety
/// `learner` must be a live handle; `input_dim` and `feat_dim` must point to
/// writable memory.
#[no_mangle]
pub unsafe extern "C" fn otcl_learner_dims(
    learner: *const OtclLearner,
    input_dim: *mut usize,
    feat_dim: *mut usize,
) -> OtclStatus {
    guard(|| {
        let Some(l) = learner.as_ref() else {
            return fail(OtclStatus::NullPointer, "null learner");
        };
        if input_dim.is_null() || feat_dim.is_null() {
            return fail(OtclStatus::NullPointer, "null output pointer");
        }
        *input_dim = l.inner.extractor.input_dim();
        *feat_dim = l.inner.extractor.feat_dim();
        OtclStatus::Ok
    })
}

unsafe fn input_rows<'a>(
    l: &OtclLearner,
    x: *const f64,
    rows: usize,
    dim: usize,
) -> Result<Vec<&'a [f64]>, OtclStatus> {
    if dim != l.inner.extractor.input_dim() {
        return Err(fail(
            OtclStatus::Data,
            format!("inputs have {dim} columns, learner expects {}", l.inner.extractor.input_dim()),
        ));
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    if x.is_null() {
        return Err(fail(OtclStatus::NullPointer, "null input array"));
    }
    let all = std::slice::from_raw_parts(x, rows * dim);
    Ok(all.chunks(dim).collect())
}

/// Predicts the class of each of the `rows` row-major inputs of width `dim`,
/// writing `rows` labels to `labels`.
///
/// # Safety
/// `x` must hold `rows * dim` doubles; `labels` must hold `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn otcl_learner_predict(
    learner: *const OtclLearner,
    x: *const f64,
    rows: usize,
    dim: usize,
    labels: *mut usize,
) -> OtclStatus {
    guard(|| {
        let Some(l) = learner.as_ref() else {
            return fail(OtclStatus::NullPointer, "null learner");
        };
        let inputs = match input_rows(l, x, rows, dim) {
            Ok(i) => i,
            Err(s) => return s,
        };
        if rows > 0 && labels.is_null() {
            return fail(OtclStatus::NullPointer, "null label array");
        }
        match predict_batch(&inputs, &l.inner.extractor, &l.inner.otmm) {
            Ok(p) => {
                if rows > 0 {
                    std::slice::from_raw_parts_mut(labels, rows).copy_from_slice(&p);
                }
                OtclStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Writes the features of each input row (row-major, `rows * feat_dim`
/// doubles) to `out`; `out_len` is its capacity in doubles.
///
/// # Safety
/// `x` must hold `rows * dim` doubles; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn otcl_learner_embed(
    learner: *const OtclLearner,
    x: *const f64,
    rows: usize,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> OtclStatus {
    guard(|| {
        let Some(l) = learner.as_ref() else {
            return fail(OtclStatus::NullPointer, "null learner");
        };
        let inputs = match input_rows(l, x, rows, dim) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let need = rows * l.inner.extractor.feat_dim();
        if out_len < need {
            return fail(OtclStatus::BufferTooSmall, format!("{out_len} doubles, {need} needed"));
        }
        if need == 0 {
            return OtclStatus::Ok;
        }
        if out.is_null() {
            return fail(OtclStatus::NullPointer, "null output array");
        }
        match l.inner.extractor.extract_features(&inputs) {
            Ok(z) => {
                std::slice::from_raw_parts_mut(out, need).copy_from_slice(z.values());
                OtclStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Entropic optimal transport value between two uniform point clouds of
/// width `dim` under squared Euclidean cost.
///
/// # Safety
/// `a` must hold `n * dim` doubles, `b` must hold `m * dim` doubles, `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn otcl_sinkhorn_uniform(
    a: *const f64,
    n: usize,
    b: *const f64,
    m: usize,
    dim: usize,
    epsilon: f64,
    out: *mut f64,
) -> OtclStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(OtclStatus::NullPointer, "null argument");
        }
        let measure = |p: *const f64, k: usize| {
            let vals = std::slice::from_raw_parts(p, k * dim).to_vec();
            Tensor::matrix(k, dim, vals).and_then(DiscreteMeasure::uniform)
        };
        let result = measure(a, n).and_then(|p| {
            let q = measure(b, m)?;
            sinkhorn_distance(&p, &q, epsilon, 10_000, 1e-9)
        });
        match result {
            Ok(sol) => {
                *out = sol.value;
                OtclStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}
