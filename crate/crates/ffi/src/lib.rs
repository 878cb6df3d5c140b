//! C ABI over `kdpe-core`.
//!
//! Objects cross the boundary as opaque pointers created by `*_new`/`*_fit`
//! style functions and released with the matching `*_free`. Every fallible
//! call returns a [`KdpeStatus`]; on failure the message is available from
//! [`kdpe_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use kdpe_core::distribution::{FiniteModel, ModelDocument};
use kdpe_core::functionals::{evaluate, TargetParameter};
use kdpe_core::kdpe::{kdpe_fit, KdpeConfig};
use kdpe_core::observation::{Observation, Schema};
use kdpe_core::preestimate::{fit_pre_estimate, PreEstimateConfig, PreEstimateMethod};
use kdpe_core::simulation::{generate, DgpSpec};
use kdpe_core::KdpeError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdpeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidInput = 3,
    SolverFailure = 4,
    Io = 5,
    Internal = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdpeDgp {
    Dgp1 = 1,
    Dgp2 = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdpeTarget {
    Ate = 0,
    Rr = 1,
    Or = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdpePreMethod {
    NadarayaWatson = 0,
    LogisticLinear = 1,
    Oracle = 2,
}

/// Tuning for [`kdpe_fit_model`]; start from [`kdpe_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdpeOptions {
    pub lambda: f64,
    pub gamma: f64,
    pub c_bound: f64,
    pub max_outer_iterations: usize,
    pub solver_tol: f64,
}

/// Summary of a KDPE run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KdpeFitInfo {
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

/// Opaque dataset.
pub struct KdpeDataset {
    obs: Vec<Observation>,
}

/// Opaque finite-support model.
pub struct KdpeModel {
    model: FiniteModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &KdpeError) -> KdpeStatus {
    match e {
        KdpeError::InvalidInput(_)
        | KdpeError::SchemaMismatch { .. }
        | KdpeError::OffSupport(_)
        | KdpeError::Config(_)
        | KdpeError::Unsupported(_) => KdpeStatus::InvalidInput,
        KdpeError::Solver(_)
        | KdpeError::ConstraintViolation(_)
        | KdpeError::BootstrapFailure { .. } => KdpeStatus::SolverFailure,
        KdpeError::Io(_) | KdpeError::Csv(_) | KdpeError::Json(_) => KdpeStatus::Io,
        KdpeError::StaleKernel | KdpeError::Internal(_) => KdpeStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Core(KdpeError),
}

impl From<KdpeError> for Failure {
    fn from(e: KdpeError) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KdpeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KdpeStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            KdpeStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            KdpeStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside kdpe".into());
            KdpeStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn schema(d: KdpeDgp) -> Schema {
    match d {
        KdpeDgp::Dgp1 => Schema::Dgp1,
        KdpeDgp::Dgp2 => Schema::Dgp2,
    }
}

fn target(t: KdpeTarget) -> TargetParameter {
    match t {
        KdpeTarget::Ate => TargetParameter::Ate,
        KdpeTarget::Rr => TargetParameter::Rr,
        KdpeTarget::Or => TargetParameter::Or,
    }
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kdpe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn kdpe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default options for `dgp`.
#[no_mangle]
pub extern "C" fn kdpe_options_default(dgp: KdpeDgp) -> KdpeOptions {
    let c = KdpeConfig::default_for(schema(dgp));
    KdpeOptions {
        lambda: c.lambda,
        gamma: c.gamma,
        c_bound: c.c_bound,
        max_outer_iterations: c.max_outer_iterations,
        solver_tol: c.solver_tol,
    }
}

/// Draws `n` observations from `dgp` with `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn kdpe_dataset_simulate(
    dgp: KdpeDgp,
    n: usize,
    seed: u64,
    out: *mut *mut KdpeDataset,
) -> KdpeStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let obs = generate(&DgpSpec::new(schema(dgp), n, seed)?)?;
        *out = Box::into_raw(Box::new(KdpeDataset { obs }));
        Ok(())
    })
}

/// Builds a point-treatment dataset from column arrays of length `n`.
///
/// # Safety
/// Each array must hold `n` readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdpe_dataset_from_dgp1(
    x: *const f64,
    a: *const u8,
    y: *const u8,
    n: usize,
    out: *mut *mut KdpeDataset,
) -> KdpeStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let (x, a, y) = (input(x, n, "x")?, input(a, n, "a")?, input(y, n, "y")?);
        let obs: Vec<Observation> = (0..n).map(|i| Observation::dgp1(x[i], a[i], y[i])).collect();
        finish_dataset(obs, out)
    })
}

/// Builds a longitudinal dataset from column arrays of length `n`.
///
/// # Safety
/// Each array must hold `n` readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdpe_dataset_from_dgp2(
    x: *const f64,
    a0: *const u8,
    l1: *const u8,
    a1: *const u8,
    y: *const u8,
    n: usize,
    out: *mut *mut KdpeDataset,
) -> KdpeStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let x = input(x, n, "x")?;
        let (a0, l1) = (input(a0, n, "a0")?, input(l1, n, "l1")?);
        let (a1, y) = (input(a1, n, "a1")?, input(y, n, "y")?);
        let obs: Vec<Observation> = (0..n)
            .map(|i| Observation::dgp2(x[i], a0[i], l1[i], a1[i], y[i]))
            .collect();
        finish_dataset(obs, out)
    })
}

unsafe fn finish_dataset(obs: Vec<Observation>, out: *mut *mut KdpeDataset) -> Result<(), Failure> {
    if obs.len() < 2 {
        return Err(Failure::Arg(format!("need at least 2 observations, got {}", obs.len())));
    }
    for o in &obs {
        o.validate()?;
    }
    *out = Box::into_raw(Box::new(KdpeDataset { obs }));
    Ok(())
}

/// Number of observations, or 0 for null.
///
/// # Safety
/// `ds` must be null or a live dataset.
#[no_mangle]
pub unsafe extern "C" fn kdpe_dataset_len(ds: *const KdpeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.obs.len())
}

/// # Safety
/// `ds` must be null or a dataset not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kdpe_dataset_free(ds: *mut KdpeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits the initial model, clipping every table to `[clip, 1 - clip]`.
///
/// # Safety
/// `ds` must be a live dataset and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kdpe_pre_estimate(
    ds: *const KdpeDataset,
    method: KdpePreMethod,
    clip: f64,
    out: *mut *mut KdpeModel,
) -> KdpeStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let method = match method {
            KdpePreMethod::NadarayaWatson => PreEstimateMethod::NadarayaWatson,
            KdpePreMethod::LogisticLinear => PreEstimateMethod::LogisticLinear,
            KdpePreMethod::Oracle => PreEstimateMethod::Oracle,
        };
        let cfg = PreEstimateConfig { method, clip, ..Default::default() };
        let model = fit_pre_estimate(&ds.obs, &cfg)?;
        *out = Box::into_raw(Box::new(KdpeModel { model }));
        Ok(())
    })
}

/// Runs KDPE from `pre` on `ds` with the default kernel for the dataset.
/// `info` may be null.
///
/// # Safety
/// `ds` and `pre` must be live handles, `opts` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kdpe_fit_model(
    ds: *const KdpeDataset,
    pre: *const KdpeModel,
    opts: *const KdpeOptions,
    out: *mut *mut KdpeModel,
    info: *mut KdpeFitInfo,
) -> KdpeStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let pre = deref(pre, "pre")?;
        let o = deref(opts, "opts")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cfg = KdpeConfig {
            lambda: o.lambda,
            gamma: o.gamma,
            c_bound: o.c_bound,
            max_outer_iterations: o.max_outer_iterations,
            solver_tol: o.solver_tol,
        };
        let kernel = kdpe_core::kernel::BaseKernel::default_for(pre.model.schema());
        let fit = kdpe_fit(&ds.obs, &pre.model, &kernel, &cfg)?;
        if let Some(info) = info.as_mut() {
            *info = KdpeFitInfo {
                iterations: fit.trace.iterations(),
                converged: fit.trace.converged(),
                seconds: fit.seconds,
            };
        }
        *out = Box::into_raw(Box::new(KdpeModel { model: fit.model }));
        Ok(())
    })
}

/// Plug-in value of `t` under `model`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kdpe_model_evaluate(
    model: *const KdpeModel,
    t: KdpeTarget,
    out: *mut f64,
) -> KdpeStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = evaluate(&m.model, target(t))?;
        Ok(())
    })
}

/// Versioned JSON document for `model`; release with [`kdpe_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kdpe_model_to_json(
    model: *const KdpeModel,
    out: *mut *mut c_char,
) -> KdpeStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let text = ModelDocument::from_model(&m.model, None).to_json()?;
        let c = CString::new(text).map_err(|e| Failure::Arg(e.to_string()))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// Parses a model document produced by [`kdpe_model_to_json`].
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kdpe_model_from_json(
    json: *const c_char,
    out: *mut *mut KdpeModel,
) -> KdpeStatus {
    guard(|| {
        if json.is_null() {
            return Err(Failure::Null("json"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Failure::Arg(format!("json is not UTF-8: {e}")))?;
        let model = ModelDocument::from_json(text)?.into_model()?;
        *out = Box::into_raw(Box::new(KdpeModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a model not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kdpe_model_free(model: *mut KdpeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kdpe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping_covers_solver_and_input() {
        assert_eq!(status_of(&KdpeError::Solver("x".into())), KdpeStatus::SolverFailure);
        assert_eq!(status_of(&KdpeError::OffSupport(1.0)), KdpeStatus::InvalidInput);
        assert_eq!(status_of(&KdpeError::StaleKernel), KdpeStatus::Internal);
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, KdpeStatus::Panic);
        let msg = unsafe { CStr::from_ptr(kdpe_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "panic inside kdpe");
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(kdpe_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
