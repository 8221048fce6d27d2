//! C ABI over the experiment pipeline: opaque handles, integer status
//! codes, and a thread-local last-error message. The generated header lands
//! in `include/trajepa.h`.
//!
//! Handle lifecycle: `tjp_config_load` -> `tjp_pipeline_open` -> stage
//! calls -> `tjp_pipeline_free` / `tjp_config_free`. Handles are not
//! thread-safe; use one per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use trajepa::curriculum::ParadigmName;
use trajepa::harness::{ExperimentConfig, Pipeline, Preset, ReportFormat};
use trajepa::Error;

/// Status codes returned by every fallible call. The numeric values match
/// the CLI exit-code contract.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TjpStatus {
    Ok = 0,
    ConfigError = 1,
    DataError = 2,
    TrainingDiverged = 3,
    EvaluationError = 4,
    NullArgument = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque experiment configuration.
pub struct TjpConfig {
    inner: ExperimentConfig,
}

/// Opaque pipeline handle bound to a run directory (holds its lock).
pub struct TjpPipeline {
    inner: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").expect("empty cstring"));
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul-free message");
    });
}

fn status_of(e: &Error) -> TjpStatus {
    match e.exit_code() {
        1 => TjpStatus::ConfigError,
        2 => TjpStatus::DataError,
        3 => TjpStatus::TrainingDiverged,
        _ => TjpStatus::EvaluationError,
    }
}

fn fail(e: Error) -> TjpStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn guard<F: FnOnce() -> TjpStatus>(f: F) -> TjpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("panic inside trajepa-ffi call");
            TjpStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok()
}

fn copy_out(s: &str, buf: *mut c_char, cap: usize) -> TjpStatus {
    let bytes = s.as_bytes();
    if buf.is_null() {
        set_error("output buffer is null");
        return TjpStatus::NullArgument;
    }
    if cap < bytes.len() + 1 {
        set_error(&format!("buffer of {cap} bytes too small for {} + NUL", bytes.len()));
        return TjpStatus::BufferTooSmall;
    }
    unsafe {
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
        *buf.add(bytes.len()) = 0;
    }
    TjpStatus::Ok
}

/// Library version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn tjp_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message for the last error on this thread; valid until the next failing
/// call on the same thread. Do not free.
#[no_mangle]
pub extern "C" fn tjp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a configuration. `path` may be null for pure preset defaults;
/// `preset` is "desk" or "appendix-b" (null means "desk").
///
/// # Safety
/// `path` and `preset` must be null or valid NUL-terminated strings; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tjp_config_load(
    path: *const c_char,
    preset: *const c_char,
    out: *mut *mut TjpConfig,
) -> TjpStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return TjpStatus::NullArgument;
        }
        let preset = match cstr(preset) {
            Some(s) => match Preset::from_str(s) {
                Ok(p) => p,
                Err(e) => return fail(e),
            },
            None => Preset::Desk,
        };
        let cfg = match cstr(path) {
            Some(p) => ExperimentConfig::from_file(Path::new(p), preset),
            None => Ok(ExperimentConfig::preset(preset)),
        };
        match cfg {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(TjpConfig { inner }));
                TjpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Override the config seed.
///
/// # Safety
/// `cfg` must be a live handle from `tjp_config_load`.
#[no_mangle]
pub unsafe extern "C" fn tjp_config_set_seed(cfg: *mut TjpConfig, seed: u64) -> TjpStatus {
    guard(|| {
        let Some(cfg) = cfg.as_mut() else {
            set_error("config handle is null");
            return TjpStatus::NullArgument;
        };
        cfg.inner.seed = seed;
        TjpStatus::Ok
    })
}

/// Canonical config hash; `buf` receives a NUL-terminated hex string.
///
/// # Safety
/// `cfg` must be a live handle; `buf` must hold at least `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn tjp_config_hash(
    cfg: *const TjpConfig,
    buf: *mut c_char,
    cap: usize,
) -> TjpStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("config handle is null");
            return TjpStatus::NullArgument;
        };
        copy_out(&cfg.inner.config_hash(), buf, cap)
    })
}

/// # Safety
/// `cfg` must come from `tjp_config_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tjp_config_free(cfg: *mut TjpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Open a pipeline on a run directory (acquires the directory lock).
///
/// # Safety
/// `cfg` must be a live config handle; `out_dir` a valid string; `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tjp_pipeline_open(
    cfg: *const TjpConfig,
    out_dir: *const c_char,
    out: *mut *mut TjpPipeline,
) -> TjpStatus {
    guard(|| {
        let (Some(cfg), Some(dir)) = (cfg.as_ref(), cstr(out_dir)) else {
            set_error("config handle or out_dir is null/invalid");
            return TjpStatus::NullArgument;
        };
        if out.is_null() {
            set_error("out pointer is null");
            return TjpStatus::NullArgument;
        }
        match Pipeline::new(cfg.inner.clone(), &PathBuf::from(dir)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(TjpPipeline { inner }));
                TjpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `p` must come from `tjp_pipeline_open` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tjp_pipeline_free(p: *mut TjpPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

macro_rules! pipeline_call {
    ($p:expr, $body:expr) => {{
        let Some(p) = $p.as_ref() else {
            set_error("pipeline handle is null");
            return TjpStatus::NullArgument;
        };
        #[allow(clippy::redundant_closure_call)]
        match ($body)(&p.inner) {
            Ok(()) => TjpStatus::Ok,
            Err(e) => fail(e),
        }
    }};
}

/// Generate the synthetic dataset and splits (cached).
///
/// # Safety
/// `p` must be a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn tjp_generate_data(p: *const TjpPipeline) -> TjpStatus {
    guard(|| pipeline_call!(p, |pl: &Pipeline| pl.dataset().map(|_| ())))
}

/// Run the shared encoder initialization pretraining (cached).
///
/// # Safety
/// `p` must be a live pipeline handle.
#[no_mangle]
pub unsafe extern "C" fn tjp_pretrain_init(p: *const TjpPipeline) -> TjpStatus {
    guard(|| pipeline_call!(p, |pl: &Pipeline| pl.sft_encoder().map(|_| ())))
}

/// Train one paradigm by name ("clin_jepa", "vjepa2ac_style", "sft_only",
/// "no_warmup", "no_alignment").
///
/// # Safety
/// `p` must be a live pipeline handle; `paradigm` a valid string.
#[no_mangle]
pub unsafe extern "C" fn tjp_train(p: *const TjpPipeline, paradigm: *const c_char) -> TjpStatus {
    guard(|| {
        let Some(name) = cstr(paradigm) else {
            set_error("paradigm is null/invalid");
            return TjpStatus::NullArgument;
        };
        let name = match ParadigmName::from_str(name) {
            Ok(n) => n,
            Err(e) => return fail(e),
        };
        pipeline_call!(p, |pl: &Pipeline| pl.train(name).map(|_| ()))
    })
}

/// Execute every stage and emit the report bundle; `format` is "tables",
/// "plots", or "all" (null means "all").
///
/// # Safety
/// `p` must be a live pipeline handle; `format` null or a valid string.
#[no_mangle]
pub unsafe extern "C" fn tjp_run_all(p: *const TjpPipeline, format: *const c_char) -> TjpStatus {
    guard(|| {
        let fmt = match cstr(format) {
            Some(s) => match ReportFormat::from_str(s) {
                Ok(f) => f,
                Err(e) => return fail(e),
            },
            None => ReportFormat::All,
        };
        pipeline_call!(p, |pl: &Pipeline| pl.run_all(fmt).map(|_| ()))
    })
}

/// Bundle hash of a completed run; `buf` receives a NUL-terminated hex
/// string.
///
/// # Safety
/// `p` must be a live pipeline handle; `buf` must hold at least `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn tjp_bundle_hash(
    p: *const TjpPipeline,
    buf: *mut c_char,
    cap: usize,
) -> TjpStatus {
    guard(|| {
        let Some(p) = p.as_ref() else {
            set_error("pipeline handle is null");
            return TjpStatus::NullArgument;
        };
        match trajepa::harness::bundle_hash(p.inner.out_dir()) {
            Ok(h) => copy_out(&h, buf, cap),
            Err(e) => fail(e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn version_and_errors() {
        unsafe {
            let v = CStr::from_ptr(tjp_version()).to_str().unwrap();
            assert_eq!(v, env!("CARGO_PKG_VERSION"));
            let mut out: *mut TjpConfig = std::ptr::null_mut();
            let bad = c("no-such-preset");
            let status = tjp_config_load(std::ptr::null(), bad.as_ptr(), &mut out);
            assert_eq!(status, TjpStatus::ConfigError);
            let msg = CStr::from_ptr(tjp_last_error_message()).to_str().unwrap();
            assert!(msg.contains("preset"), "{msg}");
        }
    }

    #[test]
    fn null_arguments_are_rejected() {
        unsafe {
            assert_eq!(
                tjp_config_load(std::ptr::null(), std::ptr::null(), std::ptr::null_mut()),
                TjpStatus::NullArgument
            );
            assert_eq!(tjp_config_set_seed(std::ptr::null_mut(), 1), TjpStatus::NullArgument);
            assert_eq!(tjp_generate_data(std::ptr::null()), TjpStatus::NullArgument);
        }
    }

    #[test]
    fn config_roundtrip_and_hash() {
        unsafe {
            let mut cfg: *mut TjpConfig = std::ptr::null_mut();
            assert_eq!(
                tjp_config_load(std::ptr::null(), std::ptr::null(), &mut cfg),
                TjpStatus::Ok
            );
            assert_eq!(tjp_config_set_seed(cfg, 99), TjpStatus::Ok);
            let mut buf = vec![0i8; 80];
            assert_eq!(tjp_config_hash(cfg, buf.as_mut_ptr(), buf.len()), TjpStatus::Ok);
            let h = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_string();
            assert_eq!(h.len(), 64);
            // too-small buffer
            let mut tiny = vec![0i8; 8];
            assert_eq!(
                tjp_config_hash(cfg, tiny.as_mut_ptr(), tiny.len()),
                TjpStatus::BufferTooSmall
            );
            tjp_config_free(cfg);
        }
    }

    #[test]
    fn dataset_stage_through_ffi() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.toml");
        std::fs::write(
            &cfg_path,
            "[generator]\nn_patients = 12\nmin_stay_hours = 20\nmax_stay_hours = 26\n\n[dataset]\nt_max = 20\nstride = 12\n\n[eval]\ncontext = 8\nhorizon = 6\n",
        )
        .unwrap();
        unsafe {
            let path = c(cfg_path.to_str().unwrap());
            let mut cfg: *mut TjpConfig = std::ptr::null_mut();
            assert_eq!(
                tjp_config_load(path.as_ptr(), std::ptr::null(), &mut cfg),
                TjpStatus::Ok,
                "{}",
                CStr::from_ptr(tjp_last_error_message()).to_string_lossy()
            );
            let out_dir = c(dir.path().join("run").to_str().unwrap());
            let mut p: *mut TjpPipeline = std::ptr::null_mut();
            assert_eq!(
                tjp_pipeline_open(cfg, out_dir.as_ptr(), &mut p),
                TjpStatus::Ok
            );
            assert_eq!(tjp_generate_data(p), TjpStatus::Ok);
            // unknown paradigm -> config error with message
            let bogus = c("bogus");
            assert_eq!(tjp_train(p, bogus.as_ptr()), TjpStatus::ConfigError);
            tjp_pipeline_free(p);
            tjp_config_free(cfg);
        }
        assert!(dir.path().join("run/dataset/manifest.json").is_file());
    }
}
