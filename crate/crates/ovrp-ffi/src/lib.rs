//! C ABI for the ovrp estimator.
//!
//! Conventions:
//! - Handles (`OvrpModel`, `OvrpFit`) are opaque; free them with the
//!   matching `*_free` function exactly once.
//! - Every fallible call returns an [`OvrpStatus`]; on failure the
//!   thread-local message from [`ovrp_last_error_message`] describes it.
//!   The message pointer stays valid until the next failing call on the
//!   same thread.
//! - Strings returned through `char**` outputs are heap-allocated and must
//!   be released with [`ovrp_string_free`].
//! - All functions are panic-safe: a Rust panic is caught and surfaced as
//!   `OVRP_STATUS_PANIC` instead of unwinding across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use ovrp::config::RunConfig;
use ovrp::error::Error;
use ovrp::estimator::{fit, FitResult};
use ovrp::likelihood::{CellTable, NonresponseDesign};
use ovrp::model::{validate_dataset, ModelSpec, Stratum};
use ovrp::output;
use ovrp::population::{self, Target};

/// Status codes for every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OvrpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Arguments violated a documented precondition.
    InvalidArgument = 2,
    /// Input files or configuration were malformed.
    DataError = 3,
    /// A fit completed but no restart met a convergence criterion; the
    /// output handle is still valid.
    Nonconvergence = 4,
    /// Internal numerical failure.
    Internal = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(err: &Error) -> OvrpStatus {
    match err {
        Error::InvalidArgument(_) | Error::DimensionMismatch(_) => OvrpStatus::InvalidArgument,
        Error::Data(_) | Error::Config(_) | Error::Io(_) | Error::Csv(_) => OvrpStatus::DataError,
        _ => OvrpStatus::Internal,
    }
}

fn fail(err: &Error) -> OvrpStatus {
    set_last_error(&err.to_string());
    status_for(err)
}

fn guard<F: FnOnce() -> OvrpStatus>(body: F) -> OvrpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic across FFI boundary".into());
            set_last_error(&msg);
            OvrpStatus::Panic
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, OvrpStatus> {
    if ptr.is_null() {
        set_last_error("null string argument");
        return Err(OvrpStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("string argument is not valid UTF-8");
        OvrpStatus::InvalidArgument
    })
}

/// A loaded dataset plus its run configuration, ready to fit.
pub struct OvrpModel {
    config: RunConfig,
    table: CellTable,
    strata: Vec<Stratum>,
    spec: ModelSpec,
    records: Vec<ovrp::model::RespondentRecord>,
}

/// A completed fit with its serialized result document.
pub struct OvrpFit {
    rho: f64,
    rho_se: f64,
    loglik: f64,
    converged: bool,
    any_restart_converged: bool,
    json: CString,
}

/// Library version as a static UTF-8 string.
#[no_mangle]
pub extern "C" fn ovrp_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Never null; empty
/// before any failure.
#[no_mangle]
pub extern "C" fn ovrp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Standard normal CDF. `x` may be infinite; NaN is invalid.
#[no_mangle]
pub extern "C" fn ovrp_std_normal_cdf(x: f64, out: *mut f64) -> OvrpStatus {
    guard(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return OvrpStatus::NullPointer;
        }
        match ovrp::bvn::std_normal_cdf(x) {
            Ok(v) => {
                unsafe { *out = v };
                OvrpStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Bivariate standard normal CDF `P(X <= a, Y <= b)` with correlation
/// `rho` in `[-1, 1]`.
#[no_mangle]
pub extern "C" fn ovrp_bvn_cdf(a: f64, b: f64, rho: f64, out: *mut f64) -> OvrpStatus {
    guard(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return OvrpStatus::NullPointer;
        }
        match ovrp::bvn::bvn_cdf(a, b, rho) {
            Ok(v) => {
                unsafe { *out = v };
                OvrpStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

fn load_model(manifest_path: &str) -> Result<OvrpModel, Error> {
    let config = RunConfig::load(Path::new(manifest_path))?;
    let (records, codebook) = ovrp::data::load_respondents(&config.respondents_path, &config.mapping)?;
    let (strata, _warnings) = ovrp::data::load_strata(&config.strata_path, &codebook)?;
    let spec = ModelSpec::new(
        codebook.y_categories,
        codebook.r_categories,
        codebook.outcome.dim(),
        codebook.response.dim(),
    )?;
    let report = validate_dataset(&records, &strata, &spec);
    if !report.is_ok() {
        let summary: Vec<String> = report.errors.iter().map(|e| e.message.clone()).collect();
        return Err(Error::Data(format!("validation failed: {}", summary.join("; "))));
    }
    let table = CellTable::from_records(&records, &spec)?;
    Ok(OvrpModel { config, table, strata, spec, records })
}

/// Load a dataset through a TOML run manifest (the same format the CLI
/// reads). On success `*out` owns the model handle.
///
/// # Safety
/// `manifest_path` must be a valid NUL-terminated UTF-8 path; `out` must
/// point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ovrp_model_load(
    manifest_path: *const c_char,
    out: *mut *mut OvrpModel,
) -> OvrpStatus {
    guard(|| {
        if out.is_null() {
            set_last_error("null output pointer");
            return OvrpStatus::NullPointer;
        }
        let path = match cstr_arg(manifest_path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_model(path) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(model)) };
                OvrpStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

macro_rules! model_scalar_accessor {
    ($(#[$doc:meta])* $name:ident, $ty:ty, $body:expr) => {
        $(#[$doc])*
        /// # Safety
        /// `model` must be a live handle from `ovrp_model_load`; `out`
        /// must point to writable storage.
        #[no_mangle]
        pub unsafe extern "C" fn $name(model: *const OvrpModel, out: *mut $ty) -> OvrpStatus {
            guard(|| {
                if model.is_null() || out.is_null() {
                    set_last_error("null pointer argument");
                    return OvrpStatus::NullPointer;
                }
                let model = unsafe { &*model };
                let value: $ty = $body(model);
                unsafe { *out = value };
                OvrpStatus::Ok
            })
        }
    };
}

model_scalar_accessor!(
    /// Number of respondent records in the loaded dataset.
    ovrp_model_n_respondents,
    usize,
    |m: &OvrpModel| m.table.n_records()
);
model_scalar_accessor!(
    /// Number of aggregated likelihood cells.
    ovrp_model_n_cells,
    usize,
    |m: &OvrpModel| m.table.n_cells()
);
model_scalar_accessor!(
    /// Number of population strata.
    ovrp_model_n_strata,
    usize,
    |m: &OvrpModel| m.strata.len()
);
model_scalar_accessor!(
    /// Number of outcome categories.
    ovrp_model_y_categories,
    usize,
    |m: &OvrpModel| m.spec.y_categories
);
model_scalar_accessor!(
    /// Number of observed proxy categories (nonresponse is category R+1).
    ovrp_model_r_categories,
    usize,
    |m: &OvrpModel| m.spec.r_categories
);

fn run_fit(model: &OvrpModel, nr: NonresponseDesign) -> Result<OvrpFit, Error> {
    let fitted: FitResult = fit(&model.table, &model.strata, &nr, &model.config.fit)?;
    let rate = nr.implied_rate(model.table.total_multiplicity());
    let estimates = population::distribution_estimates(
        &fitted,
        &model.spec,
        &model.strata,
        nr.n_miss,
        model.config.flags.reweighted_nonresp_aggregation,
    )?;
    let mut blocks: Vec<output::DistributionBlock> = estimates
        .iter()
        .map(|est| output::distribution_block(est, Some(rate)))
        .collect();
    let raw = population::baseline_proportions(&model.records, model.spec.y_categories, false)?;
    blocks.push(output::distribution_block(
        &population::DistributionEstimate {
            target: Target::Raw,
            proportions: raw,
            se: None,
            n_miss_assumed: 0.0,
        },
        None,
    ));
    let doc = output::build_fit_doc(&fitted, &model.table, model.strata.len(), &nr, blocks);
    let json = output::to_json_pretty(&doc)?;
    let json = CString::new(json).map_err(|_| Error::Internal("NUL byte in JSON".into()))?;
    Ok(OvrpFit {
        rho: fitted.params.rho,
        rho_se: *fitted.se_structural.last().unwrap_or(&f64::NAN),
        loglik: fitted.loglik,
        converged: fitted.converged,
        any_restart_converged: fitted.any_restart_converged(),
        json,
    })
}

fn nonresponse_from_config(model: &OvrpModel) -> Result<NonresponseDesign, Error> {
    if let Some(count) = model.config.nonresponse.count {
        NonresponseDesign::known_count(count)
    } else if let Some(rate) = model.config.nonresponse.rate {
        NonresponseDesign::from_rate(rate, model.table.total_multiplicity())
    } else {
        Err(Error::Config(
            "manifest [nonresponse] must set count or rate for a single fit".into(),
        ))
    }
}

unsafe fn finish_fit(
    model: *const OvrpModel,
    out: *mut *mut OvrpFit,
    nr: Result<NonresponseDesign, Error>,
) -> OvrpStatus {
    if model.is_null() || out.is_null() {
        set_last_error("null pointer argument");
        return OvrpStatus::NullPointer;
    }
    let model = unsafe { &*model };
    let nr = match nr {
        Ok(nr) => nr,
        Err(e) => return fail(&e),
    };
    match run_fit(model, nr) {
        Ok(result) => {
            let status = if result.any_restart_converged {
                OvrpStatus::Ok
            } else {
                set_last_error("no restart converged; result is the best point found");
                OvrpStatus::Nonconvergence
            };
            unsafe { *out = Box::into_raw(Box::new(result)) };
            status
        }
        Err(e) => fail(&e),
    }
}

/// Fit using the nonresponse source from the manifest (`count` or `rate`).
/// `*out` is valid on `OK` and on `NONCONVERGENCE`.
///
/// # Safety
/// `model` must be a live handle; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ovrp_fit(model: *const OvrpModel, out: *mut *mut OvrpFit) -> OvrpStatus {
    guard(|| unsafe {
        let nr = if model.is_null() {
            Err(Error::InvalidArgument("null model".into()))
        } else {
            nonresponse_from_config(&*model)
        };
        finish_fit(model, out, nr)
    })
}

/// Fit under an assumed nonresponse rate in `[0, 1)`, overriding the
/// manifest.
///
/// # Safety
/// `model` must be a live handle; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ovrp_fit_with_rate(
    model: *const OvrpModel,
    rate: f64,
    out: *mut *mut OvrpFit,
) -> OvrpStatus {
    guard(|| unsafe {
        let nr = if model.is_null() {
            Err(Error::InvalidArgument("null model".into()))
        } else {
            NonresponseDesign::from_rate(rate, (*model).table.total_multiplicity())
        };
        finish_fit(model, out, nr)
    })
}

/// Fit with a known count of missing units, overriding the manifest.
///
/// # Safety
/// `model` must be a live handle; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ovrp_fit_with_count(
    model: *const OvrpModel,
    n_miss: f64,
    out: *mut *mut OvrpFit,
) -> OvrpStatus {
    guard(|| unsafe { finish_fit(model, out, NonresponseDesign::known_count(n_miss)) })
}

macro_rules! fit_scalar_accessor {
    ($(#[$doc:meta])* $name:ident, $ty:ty, $body:expr) => {
        $(#[$doc])*
        /// # Safety
        /// `fit` must be a live handle from a fit call; `out` must point
        /// to writable storage.
        #[no_mangle]
        pub unsafe extern "C" fn $name(fit: *const OvrpFit, out: *mut $ty) -> OvrpStatus {
            guard(|| {
                if fit.is_null() || out.is_null() {
                    set_last_error("null pointer argument");
                    return OvrpStatus::NullPointer;
                }
                let fit = unsafe { &*fit };
                let value: $ty = $body(fit);
                unsafe { *out = value };
                OvrpStatus::Ok
            })
        }
    };
}

fit_scalar_accessor!(
    /// Estimated latent correlation.
    ovrp_fit_rho,
    f64,
    |f: &OvrpFit| f.rho
);
fit_scalar_accessor!(
    /// Delta-method standard error of the correlation.
    ovrp_fit_rho_se,
    f64,
    |f: &OvrpFit| f.rho_se
);
fit_scalar_accessor!(
    /// Maximized log-likelihood.
    ovrp_fit_loglik,
    f64,
    |f: &OvrpFit| f.loglik
);
fit_scalar_accessor!(
    /// Whether the winning restart converged.
    ovrp_fit_converged,
    bool,
    |f: &OvrpFit| f.converged
);

/// Copy the fit's full JSON result document (same schema as the CLI).
/// Free the returned string with [`ovrp_string_free`].
///
/// # Safety
/// `fit` must be a live handle; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ovrp_fit_to_json(
    fit: *const OvrpFit,
    out: *mut *mut c_char,
) -> OvrpStatus {
    guard(|| {
        if fit.is_null() || out.is_null() {
            set_last_error("null pointer argument");
            return OvrpStatus::NullPointer;
        }
        let fit = unsafe { &*fit };
        unsafe { *out = fit.json.clone().into_raw() };
        OvrpStatus::Ok
    })
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have been returned by an `ovrp_*` function and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ovrp_string_free(s: *mut c_char) {
    if !s.is_null() {
        unsafe { drop(CString::from_raw(s)) };
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must come from `ovrp_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ovrp_model_free(model: *mut OvrpModel) {
    if !model.is_null() {
        unsafe { drop(Box::from_raw(model)) };
    }
}

/// Release a fit handle. Null is a no-op.
///
/// # Safety
/// `fit` must come from a fit call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ovrp_fit_free(fit: *mut OvrpFit) {
    if !fit.is_null() {
        unsafe { drop(Box::from_raw(fit)) };
    }
}

// Unused import guard: PathBuf appears only in signatures generated above.
#[allow(dead_code)]
fn _path_type_holder(_p: PathBuf) {}
