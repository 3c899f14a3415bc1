//! C ABI over the dida library.
//!
//! Every fallible call returns a [`DidaStatus`]; on failure the message is
//! available from [`dida_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dida::config::{parse_config, with_overrides, ConfigError};
use dida::data::from_nhwc;
use dida::eval::metrics_csv;
use dida::models::{Checkpoint, ModelBundle};
use dida::pipeline::{load_dataset, run_control, run_dida, PipelineError, RunConfig, RunReport};
use dida::substrate::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DidaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Runtime = 5,
    Io = 6,
    OutOfRange = 7,
    Panic = 8,
}

/// Run configuration handle.
pub struct DidaConfig(RunConfig);

/// Finished run: per-iteration records.
pub struct DidaReport(RunReport);

/// Trained model bundle loaded from a checkpoint.
pub struct DidaBundle(ModelBundle);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let s = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

fn fail(status: DidaStatus, msg: impl std::fmt::Display) -> DidaStatus {
    set_error(msg);
    status
}

fn pipeline_status(e: &PipelineError) -> DidaStatus {
    match e {
        PipelineError::Config(_) => DidaStatus::Config,
        PipelineError::Data(_) => DidaStatus::Data,
        PipelineError::Io { .. } => DidaStatus::Io,
        PipelineError::Partial { source, .. } => pipeline_status(source),
        _ => DidaStatus::Runtime,
    }
}

fn config_status(e: &ConfigError) -> DidaStatus {
    match e {
        ConfigError::Io { .. } => DidaStatus::Io,
        _ => DidaStatus::Config,
    }
}

/// Runs `f`, turning a panic into [`DidaStatus::Panic`].
fn guard(f: impl FnOnce() -> DidaStatus) -> DidaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(DidaStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, DidaStatus> {
    if p.is_null() {
        return Err(fail(DidaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DidaStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> DidaStatus {
    *out = Box::into_raw(Box::new(value));
    DidaStatus::Ok
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(DidaStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dida_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dida_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be a valid pointer to write the new handle to.
#[no_mangle]
pub unsafe extern "C" fn dida_config_default(out: *mut *mut DidaConfig) -> DidaStatus {
    non_null!(out);
    put(out, DidaConfig(RunConfig::default()))
}

/// Parses a TOML run config.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dida_config_from_toml(toml: *const c_char, out: *mut *mut DidaConfig) -> DidaStatus {
    non_null!(out);
    guard(|| {
        let text = match str_arg(toml, "toml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_config(text, &[]) {
            Ok(c) => put(out, DidaConfig(c)),
            Err(e) => fail(config_status(&e), e),
        }
    })
}

/// Applies one dotted `key=value` override, e.g. `da.epochs=5`.
///
/// # Safety
/// `cfg` must be a live config handle and `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dida_config_set(cfg: *mut DidaConfig, assignment: *const c_char) -> DidaStatus {
    non_null!(cfg);
    guard(|| {
        let a = match str_arg(assignment, "assignment") {
            Ok(a) => a,
            Err(s) => return s,
        };
        let cfg = &mut *cfg;
        match with_overrides(&cfg.0, &[a.to_string()]) {
            Ok(c) => {
                cfg.0 = c;
                DidaStatus::Ok
            }
            Err(e) => fail(config_status(&e), e),
        }
    })
}

/// Sets the init, data and pairing seeds together.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn dida_config_set_seed(cfg: *mut DidaConfig, seed: u64) -> DidaStatus {
    non_null!(cfg);
    (*cfg).0.set_seed(seed);
    DidaStatus::Ok
}

/// Effective config as TOML. Release with [`dida_string_free`].
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dida_config_to_toml(cfg: *const DidaConfig, out: *mut *mut c_char) -> DidaStatus {
    non_null!(cfg, out);
    *out = CString::new((*cfg).0.echo()).expect("toml has no nul").into_raw();
    DidaStatus::Ok
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dida_config_free(cfg: *mut DidaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

unsafe fn run_with(
    cfg: *const DidaConfig,
    out_dir: *const c_char,
    cache_dir: *const c_char,
    out: *mut *mut DidaReport,
    control: bool,
) -> DidaStatus {
    non_null!(cfg, out);
    guard(|| {
        let opt = |p: *const c_char, what: &str| -> Result<Option<&Path>, DidaStatus> {
            if p.is_null() {
                Ok(None)
            } else {
                str_arg(p, what).map(|s| Some(Path::new(s)))
            }
        };
        let (dir, cache) = match (opt(out_dir, "out_dir"), opt(cache_dir, "cache_dir")) {
            (Ok(d), Ok(c)) => (d, c),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let cfg = &(*cfg).0;
        let result = load_dataset(cfg, cache).and_then(|data| {
            if control {
                run_control(cfg, &data, dir)
            } else {
                run_dida(cfg, &data, dir)
            }
        });
        match result {
            Ok(r) => put(out, DidaReport(r)),
            Err(e) => fail(pipeline_status(&e), e),
        }
    })
}

/// Runs the DiDA loop. `out_dir` and `cache_dir` may be null.
///
/// # Safety
/// `cfg` must be a live handle, string arguments NUL-terminated or null, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dida_run(
    cfg: *const DidaConfig,
    out_dir: *const c_char,
    cache_dir: *const c_char,
    out: *mut *mut DidaReport,
) -> DidaStatus {
    run_with(cfg, out_dir, cache_dir, out, false)
}

/// Runs the equal-budget control arm selected by `control.variant`.
///
/// # Safety
/// Same contract as [`dida_run`].
#[no_mangle]
pub unsafe extern "C" fn dida_run_control(
    cfg: *const DidaConfig,
    out_dir: *const c_char,
    cache_dir: *const c_char,
    out: *mut *mut DidaReport,
) -> DidaStatus {
    run_with(cfg, out_dir, cache_dir, out, true)
}

/// Number of completed iterations (i = 0 included).
///
/// # Safety
/// `report` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn dida_report_iterations(report: *const DidaReport) -> usize {
    if report.is_null() {
        return 0;
    }
    (*report).0.records.len()
}

unsafe fn record_field(
    report: *const DidaReport,
    i: usize,
    out: *mut f64,
    f: impl Fn(&dida::pipeline::IterationRecord) -> Option<f64>,
) -> DidaStatus {
    non_null!(report, out);
    let records = &(*report).0.records;
    let Some(r) = records.get(i) else {
        return fail(DidaStatus::OutOfRange, format!("iteration {i} of {}", records.len()));
    };
    match f(r) {
        Some(v) => {
            *out = v;
            DidaStatus::Ok
        }
        None => fail(DidaStatus::OutOfRange, format!("iteration {i} has no such value")),
    }
}

/// Target test accuracy in percent at iteration `i`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dida_report_target_acc(report: *const DidaReport, i: usize, out: *mut f64) -> DidaStatus {
    record_field(report, i, out, |r| Some(r.target_acc))
}

/// Source test accuracy in percent at iteration `i`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dida_report_source_acc(report: *const DidaReport, i: usize, out: *mut f64) -> DidaStatus {
    record_field(report, i, out, |r| Some(r.source_acc))
}

/// Probe accuracies at iteration `i`; `OutOfRange` when probes were disabled.
///
/// # Safety
/// `report` must be a live handle and both outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dida_report_probes(
    report: *const DidaReport,
    i: usize,
    common: *mut f64,
    specific: *mut f64,
) -> DidaStatus {
    non_null!(specific);
    let s = record_field(report, i, common, |r| r.probe_common);
    if s != DidaStatus::Ok {
        return s;
    }
    record_field(report, i, specific, |r| r.probe_specific)
}

/// The metrics table as CSV text. Release with [`dida_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dida_report_metrics_csv(report: *const DidaReport, out: *mut *mut c_char) -> DidaStatus {
    non_null!(report, out);
    *out = CString::new(metrics_csv(&(*report).0.records)).expect("csv has no nul").into_raw();
    DidaStatus::Ok
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dida_report_free(report: *mut DidaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Loads the bundle stored in a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dida_bundle_load(path: *const c_char, out: *mut *mut DidaBundle) -> DidaStatus {
    non_null!(out);
    guard(|| {
        let p = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Checkpoint::load(Path::new(p)) {
            Ok(ck) => put(out, DidaBundle(ck.bundle)),
            Err(e) => fail(DidaStatus::Io, e),
        }
    })
}

/// Writes the configured `[channels, height, width]` image shape.
///
/// # Safety
/// `bundle` must be a live handle and `shape` point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn dida_bundle_image_shape(bundle: *const DidaBundle, shape: *mut usize) -> DidaStatus {
    non_null!(bundle, shape);
    let s = (*bundle).0.config().image_shape;
    ptr::copy_nonoverlapping(s.as_ptr(), shape, 3);
    DidaStatus::Ok
}

/// `[n, C, H, W]` caller memory to an NHWC batch.
unsafe fn batch(b: &ModelBundle, images: *const f32, n: usize) -> Result<Tensor, DidaStatus> {
    let [c, h, w] = b.config().image_shape;
    let chw = std::slice::from_raw_parts(images, n * c * h * w);
    let mut nhwc = vec![0.0f32; chw.len()];
    for i in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                nhwc[(i * h * w + p) * c + ch] = chw[(i * c + ch) * h * w + p];
            }
        }
    }
    Tensor::new(vec![n, h, w, c], nhwc).map_err(|e| fail(DidaStatus::Data, e))
}

/// Predicts classes for `n` images laid out `[n, C, H, W]` row-major, values
/// in [0, 1]. Writes `n` class indices to `labels`.
///
/// # Safety
/// `images` must hold `n*C*H*W` floats and `labels` room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn dida_bundle_predict(
    bundle: *const DidaBundle,
    images: *const f32,
    n: usize,
    labels: *mut u32,
) -> DidaStatus {
    non_null!(bundle, images, labels);
    guard(|| {
        let b = &(*bundle).0;
        let x = match batch(b, images, n) {
            Ok(x) => x,
            Err(s) => return s,
        };
        match b.predict(&x) {
            Ok(pred) => {
                for (i, p) in pred.into_iter().enumerate() {
                    *labels.add(i) = p as u32;
                }
                DidaStatus::Ok
            }
            Err(e) => fail(DidaStatus::Runtime, e),
        }
    })
}

/// Reconstructs `n` images `[n, C, H, W]` from their own common and specific
/// features into `out` (same layout).
///
/// # Safety
/// `images` and `out` must each hold `n*C*H*W` floats.
#[no_mangle]
pub unsafe extern "C" fn dida_bundle_reconstruct(
    bundle: *const DidaBundle,
    images: *const f32,
    n: usize,
    out: *mut f32,
) -> DidaStatus {
    non_null!(bundle, images, out);
    guard(|| {
        let b = &(*bundle).0;
        let result = batch(b, images, n)
            .and_then(|x| b.encode(&x).map_err(|e| fail(DidaStatus::Runtime, e)))
            .and_then(|f| b.decode(&f.common, &f.specific).map_err(|e| fail(DidaStatus::Runtime, e)));
        match result {
            Ok(y) => {
                let mut k = 0;
                for img in from_nhwc(&y) {
                    for &v in img.data() {
                        *out.add(k) = v;
                        k += 1;
                    }
                }
                DidaStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// # Safety
/// `bundle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dida_bundle_free(bundle: *mut DidaBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dida_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
