//! C ABI for running structslam experiments and metrics from other languages.
//!
//! Every fallible function returns an [`SsStatus`]. On failure a description
//! is stored per thread and can be read with [`ss_last_error_message`].
//! Handles are opaque and must be released with their matching `_free`
//! function. No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::Vector3;
use structslam::ba::numdiff::jacobian_check;
use structslam::sim::{compute_ate, run_experiment, AlignmentMode, ExperimentConfig, PipelineMode, RunRecord};
use structslam::SlamError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    SolverError = 4,
    IndexOutOfRange = 5,
    NotRun = 6,
    Panic = 7,
}

/// Landmark configuration of one run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsMode {
    Points = 0,
    PointsLines = 1,
    PointsLinesPlanes = 2,
}

/// Flat copy of one experiment row.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsRunMetrics {
    pub seed: u64,
    pub mode: SsMode,
    pub ate_rmse_m: f64,
    pub mean_ape_m: f64,
    pub initial_ate_m: f64,
    pub mean_reprojection_px: f64,
    pub rejected_outliers: u64,
    pub injected_outliers: u64,
    pub caught_outliers: u64,
    pub planes: u64,
    pub iterations: u64,
    pub loop_closed: bool,
    /// Negative when the relocalization trial was disabled.
    pub reloc_mean_ape_m: f64,
}

/// Opaque experiment handle.
pub struct SsExperiment {
    config: ExperimentConfig,
    hash: CString,
    runs: Option<Vec<RunRecord>>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: SsStatus, msg: impl Into<String>) -> SsStatus {
    set_error(msg);
    status
}

fn status_of(e: &SlamError) -> SsStatus {
    match e {
        SlamError::Config(_)
        | SlamError::InfeasibleConfig(_)
        | SlamError::Io(_)
        | SlamError::InvalidInput(_)
        | SlamError::LengthMismatch { .. } => SsStatus::ConfigError,
        _ => SsStatus::SolverError,
    }
}

fn guarded(f: impl FnOnce() -> SsStatus) -> SsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SsStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

fn mode_of(m: PipelineMode) -> SsMode {
    match m {
        PipelineMode::Points => SsMode::Points,
        PipelineMode::PointsLines => SsMode::PointsLines,
        PipelineMode::PointsLinesPlanes => SsMode::PointsLinesPlanes,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn ss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses and validates a JSON experiment configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_experiment_new(config_json: *const c_char, out: *mut *mut SsExperiment) -> SsStatus {
    guarded(|| {
        if config_json.is_null() || out.is_null() {
            return fail(SsStatus::NullPointer, "null argument");
        }
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let Ok(text) = unsafe { CStr::from_ptr(config_json) }.to_str() else {
            return fail(SsStatus::InvalidUtf8, "configuration is not valid UTF-8");
        };
        match ExperimentConfig::from_json(text) {
            Ok(config) => {
                let hash = CString::new(config.hash()).expect("hex digest");
                let handle = Box::new(SsExperiment {
                    config,
                    hash,
                    runs: None,
                });
                // SAFETY: checked non-null.
                unsafe { *out = Box::into_raw(handle) };
                SsStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Releases a handle. NULL is accepted.
///
/// # Safety
/// `exp` must come from [`ss_experiment_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ss_experiment_free(exp: *mut SsExperiment) {
    if !exp.is_null() {
        // SAFETY: the caller hands back ownership of a live handle.
        drop(unsafe { Box::from_raw(exp) });
    }
}

/// Runs every `(seed, mode)` cell. `threads == 0` uses all cores.
///
/// # Safety
/// `exp` must be a live handle not used concurrently from another thread.
#[no_mangle]
pub unsafe extern "C" fn ss_experiment_run(exp: *mut SsExperiment, threads: u32, deterministic: bool) -> SsStatus {
    guarded(|| {
        // SAFETY: the caller guarantees a live, exclusively used handle.
        let Some(exp) = (unsafe { exp.as_mut() }) else {
            return fail(SsStatus::NullPointer, "null handle");
        };
        let threads = (threads > 0).then_some(threads as usize);
        match run_experiment(&exp.config, threads, deterministic) {
            Ok(runs) => {
                exp.runs = Some(runs);
                SsStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Configuration hash recorded in every row, as a NUL-terminated hex string
/// owned by the handle.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_experiment_config_hash(exp: *const SsExperiment) -> *const c_char {
    // SAFETY: the caller guarantees a live handle.
    unsafe { exp.as_ref() }.map_or(ptr::null(), |e| e.hash.as_ptr())
}

/// Number of rows produced by the last run.
///
/// # Safety
/// `exp` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_experiment_run_count(exp: *const SsExperiment, out: *mut usize) -> SsStatus {
    guarded(|| {
        // SAFETY: the caller guarantees validity of both pointers.
        let (Some(exp), false) = (unsafe { exp.as_ref() }, out.is_null()) else {
            return fail(SsStatus::NullPointer, "null argument");
        };
        let Some(runs) = &exp.runs else {
            return fail(SsStatus::NotRun, "experiment has not been run");
        };
        // SAFETY: checked non-null.
        unsafe { *out = runs.len() };
        SsStatus::Ok
    })
}

/// Copies row `index` (rows are sorted by seed, then mode).
///
/// # Safety
/// `exp` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_experiment_get_run(
    exp: *const SsExperiment,
    index: usize,
    out: *mut SsRunMetrics,
) -> SsStatus {
    guarded(|| {
        // SAFETY: the caller guarantees validity of both pointers.
        let (Some(exp), false) = (unsafe { exp.as_ref() }, out.is_null()) else {
            return fail(SsStatus::NullPointer, "null argument");
        };
        let Some(runs) = &exp.runs else {
            return fail(SsStatus::NotRun, "experiment has not been run");
        };
        let Some(r) = runs.get(index) else {
            return fail(SsStatus::IndexOutOfRange, format!("row {index} of {}", runs.len()));
        };
        let m = SsRunMetrics {
            seed: r.seed,
            mode: mode_of(r.mode),
            ate_rmse_m: r.ate_rmse_m,
            mean_ape_m: r.mean_ape_m,
            initial_ate_m: r.initial_ate_m,
            mean_reprojection_px: r.mean_reprojection_px,
            rejected_outliers: r.rejected_outliers as u64,
            injected_outliers: r.injected_outliers as u64,
            caught_outliers: r.caught_outliers as u64,
            planes: r.planes as u64,
            iterations: r.iterations as u64,
            loop_closed: r.loop_closed,
            reloc_mean_ape_m: r.reloc_mean_ape_m.unwrap_or(-1.0),
        };
        // SAFETY: checked non-null.
        unsafe { *out = m };
        SsStatus::Ok
    })
}

/// All rows of the last run as a JSON array. Free with [`ss_string_free`].
///
/// # Safety
/// `exp` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_experiment_results_json(exp: *const SsExperiment, out: *mut *mut c_char) -> SsStatus {
    guarded(|| {
        // SAFETY: the caller guarantees validity of both pointers.
        let (Some(exp), false) = (unsafe { exp.as_ref() }, out.is_null()) else {
            return fail(SsStatus::NullPointer, "null argument");
        };
        let Some(runs) = &exp.runs else {
            return fail(SsStatus::NotRun, "experiment has not been run");
        };
        let text = serde_json::to_string(runs).expect("records serialize");
        // SAFETY: checked non-null.
        unsafe { *out = CString::new(text).expect("JSON has no NUL").into_raw() };
        SsStatus::Ok
    })
}

/// Releases a string returned by this library. NULL is accepted.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ss_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// ATE RMSE of `n` estimated positions against ground truth, both packed as
/// `x, y, z` triples, after similarity (`with_scale`) or rigid alignment.
/// Fewer than three positions, or collinear ones, give `SolverError`.
///
/// # Safety
/// `est` and `gt` must each point to `3 * n` readable doubles and `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_compute_ate(
    est: *const f64,
    gt: *const f64,
    n: usize,
    with_scale: bool,
    out: *mut f64,
) -> SsStatus {
    guarded(|| {
        if est.is_null() || gt.is_null() || out.is_null() {
            return fail(SsStatus::NullPointer, "null argument");
        }
        let Some(len) = n.checked_mul(3) else {
            return fail(SsStatus::ConfigError, "position count overflows");
        };
        // SAFETY: the caller guarantees 3n readable doubles behind each pointer.
        let (e, g) = unsafe { (std::slice::from_raw_parts(est, len), std::slice::from_raw_parts(gt, len)) };
        let pts = |v: &[f64]| v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
        let mode = if with_scale { AlignmentMode::Sim3 } else { AlignmentMode::Se3 };
        match compute_ate(&pts(e), &pts(g), mode) {
            Ok(m) => {
                // SAFETY: checked non-null.
                unsafe { *out = m.ate_rmse };
                SsStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Runs the analytic-versus-numeric Jacobian comparison and writes the
/// largest relative error.
///
/// # Safety
/// `out_max_rel_error` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_jacobian_check(trials: u32, seed: u64, out_max_rel_error: *mut f64) -> SsStatus {
    guarded(|| {
        if out_max_rel_error.is_null() {
            return fail(SsStatus::NullPointer, "null argument");
        }
        let k = ExperimentConfig::default().scene.intrinsics;
        let r = jacobian_check(&k, trials as usize, seed, 1e-6);
        // SAFETY: checked non-null.
        unsafe { *out_max_rel_error = r.max_rel_error() };
        SsStatus::Ok
    })
}
