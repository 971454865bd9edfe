//! C ABI over the `commentclf` pipeline.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every call returns a [`CcStatus`]; on failure
//! [`cc_last_error_message`] describes the error for the calling thread.
//! Strings returned through out-pointers are freed with [`cc_string_free`].
//! Labels cross the boundary as indices in `0..cc_label_count()`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;
use std::sync::OnceLock;

use commentclf::cli::{self, CliError, LoadedModel, RunConfig};
use commentclf::corpus::{Label, Split};
use commentclf::metrics;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// Config file or validation error.
    Config = 4,
    /// Artifact produced under an incompatible config, or an encoder dim conflict.
    Incompatible = 5,
    /// Failure while loading, training or predicting.
    Runtime = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// A validated run configuration.
pub struct CcConfig {
    inner: RunConfig,
}

/// A trained model opened from a run directory, bound to its config.
pub struct CcModel {
    config: RunConfig,
    model: LoadedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CcStatus, String);

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e {
            CliError::Config { .. } => CcStatus::Config,
            CliError::Incompatible { .. } | CliError::FingerprintMismatch { .. } => CcStatus::Incompatible,
            CliError::Runtime { .. } => CcStatus::Runtime,
        };
        let mut msg = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            msg.push_str(": ");
            msg.push_str(&s.to_string());
            source = s.source();
        }
        Failure(status, msg)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CcStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CcStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn str_array(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .enumerate()
        .map(|(i, &s)| str_arg(s, &format!("{what}[{i}]")).map(str::to_string))
        .collect()
}

unsafe fn config_ref<'a>(p: *const CcConfig) -> Result<&'a RunConfig, Failure> {
    p.as_ref().map(|c| &c.inner).ok_or_else(|| null("config"))
}

fn out_string(out: *mut *mut c_char, s: &Path) -> Result<(), Failure> {
    let c = CString::new(s.to_string_lossy().into_owned())
        .map_err(|_| Failure(CcStatus::Runtime, "path contains NUL".into()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn label_names() -> &'static [CString] {
    static NAMES: OnceLock<Vec<CString>> = OnceLock::new();
    NAMES.get_or_init(|| {
        Label::ALL
            .iter()
            .map(|l| CString::new(l.as_str()).expect("label names have no NUL"))
            .collect()
    })
}

fn labels_from(p: *const u32, n: usize, what: &str) -> Result<Vec<Label>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { std::slice::from_raw_parts(p, n) }
        .iter()
        .map(|&i| {
            Label::from_index(i as usize)
                .ok_or_else(|| Failure(CcStatus::InvalidArgument, format!("`{what}`: label index {i} out of range")))
        })
        .collect()
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn cc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn cc_version() -> *const c_char {
    static VERSION: OnceLock<CString> = OnceLock::new();
    VERSION
        .get_or_init(|| CString::new(env!("CARGO_PKG_VERSION")).expect("no NUL"))
        .as_ptr()
}

/// Number of label indices.
#[no_mangle]
pub extern "C" fn cc_label_count() -> usize {
    Label::ALL.len()
}

/// Display name of a label index, static storage; NULL when out of range.
#[no_mangle]
pub extern "C" fn cc_label_name(index: u32) -> *const c_char {
    label_names().get(index as usize).map_or(ptr::null(), |c| c.as_ptr())
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads and validates a run config, applying `n_overrides` `section.key=value`
/// overrides.
///
/// # Safety
/// Pointers must be valid NUL-terminated strings; `overrides` must hold
/// `n_overrides` of them; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_config_load(
    path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut CcConfig,
) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let overrides = str_array(overrides, n_overrides, "overrides")?;
        let inner = RunConfig::load(&path, &overrides)?;
        *out = Box::into_raw(Box::new(CcConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `config` must come from [`cc_config_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cc_config_free(config: *mut CcConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs `prepare`.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cc_prepare(config: *const CcConfig) -> CcStatus {
    guard(|| {
        cli::cmd_prepare(config_ref(config)?)?;
        Ok(())
    })
}

/// Runs `train`; on success `*run_dir_out` receives the run directory.
///
/// # Safety
/// `config` must be a live handle; `run_dir_out` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn cc_train(config: *const CcConfig, run_dir_out: *mut *mut c_char) -> CcStatus {
    guard(|| {
        let summary = cli::cmd_train(config_ref(config)?)?;
        if !run_dir_out.is_null() {
            out_string(run_dir_out, &summary.run_dir)?;
        }
        Ok(())
    })
}

/// Runs `evaluate` on `split` ("train", "dev" or "test").
///
/// # Safety
/// `config` must be a live handle; strings NUL-terminated; out-pointers
/// writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn cc_evaluate(
    config: *const CcConfig,
    artifact: *const c_char,
    split: *const c_char,
    macro_f1_out: *mut f64,
    weighted_f1_out: *mut f64,
) -> CcStatus {
    guard(|| {
        let cfg = config_ref(config)?;
        let artifact = path_arg(artifact, "artifact")?;
        let split: Split = str_arg(split, "split")?
            .parse()
            .map_err(|e: String| Failure(CcStatus::InvalidArgument, e))?;
        let s = cli::cmd_evaluate(cfg, &artifact, split)?;
        if !macro_f1_out.is_null() {
            *macro_f1_out = s.report.macro_f1;
        }
        if !weighted_f1_out.is_null() {
            *weighted_f1_out = s.report.weighted_f1;
        }
        Ok(())
    })
}

/// Opens a run directory written by [`cc_train`]. The model keeps a copy of
/// the config, so the config handle may be freed afterwards.
///
/// # Safety
/// `config` must be a live handle; `artifact` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cc_model_load(
    config: *const CcConfig,
    artifact: *const c_char,
    out: *mut *mut CcModel,
) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = config_ref(config)?.clone();
        let artifact = path_arg(artifact, "artifact")?;
        let (_, model) = cli::load_artifact(&cfg, &artifact)?;
        *out = Box::into_raw(Box::new(CcModel { config: cfg, model }));
        Ok(())
    })
}

/// Predicts `n` texts, writing label indices to `labels_out[0..n]`. Texts
/// are used as given; clean them as `prepare` does beforehand if needed.
///
/// # Safety
/// `model` must be a live handle; `texts` must hold `n` NUL-terminated
/// strings; `labels_out` must have room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn cc_model_predict(
    model: *const CcModel,
    texts: *const *const c_char,
    n: usize,
    labels_out: *mut u32,
) -> CcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let texts = str_array(texts, n, "texts")?;
        if n > 0 && labels_out.is_null() {
            return Err(null("labels_out"));
        }
        let predicted = m.model.predict(&m.config, &texts)?;
        for (i, l) in predicted.into_iter().enumerate() {
            *labels_out.add(i) = l.index() as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`cc_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cc_model_free(model: *mut CcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Macro and weighted F1 of `n` (gold, predicted) label-index pairs.
///
/// # Safety
/// `gold` and `pred` must hold `n` values; out-pointers writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn cc_f1_scores(
    gold: *const u32,
    pred: *const u32,
    n: usize,
    macro_f1_out: *mut f64,
    weighted_f1_out: *mut f64,
) -> CcStatus {
    guard(|| {
        let gold = labels_from(gold, n, "gold")?;
        let pred = labels_from(pred, n, "pred")?;
        let report =
            metrics::evaluate(&gold, &pred).map_err(|e| Failure(CcStatus::InvalidArgument, e.to_string()))?;
        if !macro_f1_out.is_null() {
            *macro_f1_out = report.macro_f1;
        }
        if !weighted_f1_out.is_null() {
            *weighted_f1_out = report.weighted_f1;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_turns_panics_into_status() {
        let st = guard(|| panic!("kaboom"));
        assert_eq!(st, CcStatus::Panic);
        let msg = unsafe { CStr::from_ptr(cc_last_error_message()) }.to_str().unwrap();
        assert!(msg.contains("kaboom"));
        assert_eq!(guard(|| Ok(())), CcStatus::Ok);
        assert!(cc_last_error_message().is_null(), "success clears the message");
    }

    #[test]
    fn cli_errors_map_to_distinct_statuses() {
        let Failure(s, _) = CliError::config(Path::new("x"), "f", "m").into();
        assert_eq!(s, CcStatus::Config);
        let Failure(s, _) = CliError::FingerprintMismatch {
            artifact_dim: 1,
            encoder_dim: 2,
        }
        .into();
        assert_eq!(s, CcStatus::Incompatible);
    }
}
