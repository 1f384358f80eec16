//! C ABI over trained residual models.
//!
//! Handles are opaque and owned by the caller once created; release them with
//! the matching `_free` function. Every fallible call returns a
//! [`DkmgpStatus`]; on failure the message is available from
//! [`dkmgp_last_error_message`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dkmgp::dynamics::{ControlInput, VehicleParams, VehicleState, STATE_DIM};
use dkmgp::mtgp::checkpoint::load_checkpoint;
use dkmgp::mtgp::PreparedModel;
use dkmgp::predictor::{
    ach_horizon, classify_condition, multistep_predict, AchThresholds, DrivingCondition,
    HorizonPolicy, ModelSet,
};
use dkmgp::Error;

pub const DKMGP_FEATURE_DIM: usize = 9;
pub const DKMGP_STATE_DIM: usize = 7;
pub const DKMGP_TARGET_DIM: usize = 3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DkmgpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Panic = 3,
    GuardViolation = 10,
    ParseError = 11,
    SchemaError = 12,
    NonUniformSampling = 13,
    InsufficientData = 14,
    DimensionMismatch = 15,
    LengthMismatch = 16,
    CholeskyFailure = 17,
    NonFiniteLoss = 18,
    VersionMismatch = 19,
    MissingHorizonModel = 20,
    InvalidArgument = 21,
    ConfigError = 22,
    Io = 23,
}

impl From<&Error> for DkmgpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::GuardViolation { .. } => DkmgpStatus::GuardViolation,
            Error::ParseError { .. } => DkmgpStatus::ParseError,
            Error::SchemaError(_) => DkmgpStatus::SchemaError,
            Error::NonUniformSampling { .. } => DkmgpStatus::NonUniformSampling,
            Error::InsufficientData(_) => DkmgpStatus::InsufficientData,
            Error::DimensionMismatch { .. } => DkmgpStatus::DimensionMismatch,
            Error::LengthMismatch { .. } => DkmgpStatus::LengthMismatch,
            Error::CholeskyFailure(_) => DkmgpStatus::CholeskyFailure,
            Error::NonFiniteLoss { .. } => DkmgpStatus::NonFiniteLoss,
            Error::VersionMismatch { .. } => DkmgpStatus::VersionMismatch,
            Error::MissingHorizonModel(_) => DkmgpStatus::MissingHorizonModel,
            Error::InvalidArgument(_) => DkmgpStatus::InvalidArgument,
            Error::ConfigError(_) => DkmgpStatus::ConfigError,
            Error::Io { .. } => DkmgpStatus::Io,
        }
    }
}

/// Vehicle parameters in SI units; angles in radians.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DkmgpVehicleParams {
    pub m: f64,
    pub iz: f64,
    pub lf: f64,
    pub lr: f64,
    pub tw: f64,
    pub h_cog: f64,
    pub g: f64,
    pub bank_theta: f64,
    pub steering_ratio: f64,
}

impl From<DkmgpVehicleParams> for VehicleParams {
    fn from(p: DkmgpVehicleParams) -> Self {
        VehicleParams {
            m: p.m,
            iz: p.iz,
            lf: p.lf,
            lr: p.lr,
            tw: p.tw,
            h_cog: p.h_cog,
            g: p.g,
            bank_theta: p.bank_theta,
            steering_ratio: p.steering_ratio,
        }
    }
}

impl From<VehicleParams> for DkmgpVehicleParams {
    fn from(p: VehicleParams) -> Self {
        DkmgpVehicleParams {
            m: p.m,
            iz: p.iz,
            lf: p.lf,
            lr: p.lr,
            tw: p.tw,
            h_cog: p.h_cog,
            g: p.g,
            bank_theta: p.bank_theta,
            steering_ratio: p.steering_ratio,
        }
    }
}

/// Opaque set of residual models keyed by correction horizon.
pub struct DkmgpModelSet {
    inner: ModelSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DkmgpStatus, msg: impl Into<String>) -> DkmgpStatus {
    set_last_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), DkmgpStatus>) -> DkmgpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DkmgpStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(DkmgpStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: Error) -> DkmgpStatus {
    let status = DkmgpStatus::from(&e);
    fail(status, e.to_string())
}

fn null(what: &str) -> DkmgpStatus {
    fail(DkmgpStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dkmgp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library defaults for the vehicle parameters.
#[no_mangle]
pub extern "C" fn dkmgp_vehicle_params_default() -> DkmgpVehicleParams {
    VehicleParams::default().into()
}

/// Creates an empty model set in `*out`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn dkmgp_model_set_new(out: *mut *mut DkmgpModelSet) -> DkmgpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let handle = Box::new(DkmgpModelSet {
            inner: ModelSet::new(),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Loads a JSON checkpoint and registers it under its training horizon,
/// replacing any model already registered there. Writes the horizon to
/// `horizon_out` when it is not null.
///
/// # Safety
/// `set` must come from [`dkmgp_model_set_new`]; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dkmgp_model_set_load_checkpoint(
    set: *mut DkmgpModelSet,
    path: *const c_char,
    horizon_out: *mut usize,
) -> DkmgpStatus {
    guard(|| {
        let set = set.as_mut().ok_or_else(|| null("set"))?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(DkmgpStatus::InvalidUtf8, "path is not valid UTF-8"))?;
        let model = load_checkpoint(path).map_err(lib_err)?;
        let horizon = model.horizon;
        let prepared = PreparedModel::new(model).map_err(lib_err)?;
        set.inner.insert(horizon, prepared);
        if !horizon_out.is_null() {
            *horizon_out = horizon;
        }
        Ok(())
    })
}

/// Number of registered horizons.
///
/// # Safety
/// `set` must be null or come from [`dkmgp_model_set_new`].
#[no_mangle]
pub unsafe extern "C" fn dkmgp_model_set_len(set: *const DkmgpModelSet) -> usize {
    set.as_ref().map_or(0, |s| s.inner.horizons().len())
}

/// Releases a model set. Null is a no-op.
///
/// # Safety
/// `set` must be null or come from [`dkmgp_model_set_new`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn dkmgp_model_set_free(set: *mut DkmgpModelSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Residual mean and variance (physical units) of the horizon-`horizon`
/// model at the raw input `d = (x, y, vx, vy, psi, delta, omega, ax, delta_dot)`.
///
/// # Safety
/// `d` must point to 9 doubles; `mean_out` and `var_out` to 3 writable
/// doubles each (`var_out` may be null).
#[no_mangle]
pub unsafe extern "C" fn dkmgp_predict_residual(
    set: *const DkmgpModelSet,
    horizon: usize,
    d: *const f64,
    mean_out: *mut f64,
    var_out: *mut f64,
) -> DkmgpStatus {
    guard(|| {
        let set = set.as_ref().ok_or_else(|| null("set"))?;
        if d.is_null() {
            return Err(null("d"));
        }
        if mean_out.is_null() {
            return Err(null("mean_out"));
        }
        let model = set
            .inner
            .get(horizon)
            .ok_or_else(|| lib_err(Error::MissingHorizonModel(horizon)))?;
        let input = std::slice::from_raw_parts(d, DKMGP_FEATURE_DIM);
        let pred = model.predict_residual(input).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(mean_out, DKMGP_TARGET_DIM).copy_from_slice(&pred.mean);
        if !var_out.is_null() {
            std::slice::from_raw_parts_mut(var_out, DKMGP_TARGET_DIM)
                .copy_from_slice(&pred.variance);
        }
        Ok(())
    })
}

/// Corrected `m`-step rollout.
///
/// `policy_n > 0` selects a fixed correction horizon; `policy_n == 0` selects
/// the adaptive policy with default thresholds. `inputs` holds `m` pairs
/// `(ax, delta_dot)`. `states_out` receives `(m + 1) * 7` doubles, starting
/// with `state`; `corrected_out`, when not null, receives `m + 1` flags.
///
/// # Safety
/// All non-null pointers must reference buffers of the sizes above.
#[no_mangle]
pub unsafe extern "C" fn dkmgp_multistep_predict(
    set: *const DkmgpModelSet,
    state: *const f64,
    inputs: *const f64,
    m: usize,
    policy_n: usize,
    params: *const DkmgpVehicleParams,
    dt: f64,
    states_out: *mut f64,
    corrected_out: *mut u8,
) -> DkmgpStatus {
    guard(|| {
        let set = set.as_ref().ok_or_else(|| null("set"))?;
        let params = params.as_ref().ok_or_else(|| null("params"))?;
        if state.is_null() {
            return Err(null("state"));
        }
        if inputs.is_null() && m > 0 {
            return Err(null("inputs"));
        }
        if states_out.is_null() {
            return Err(null("states_out"));
        }
        let mut s = [0.0; STATE_DIM];
        s.copy_from_slice(std::slice::from_raw_parts(state, STATE_DIM));
        let s0 = VehicleState::from_array(s);
        let raw = if m == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(inputs, 2 * m)
        };
        let us: Vec<ControlInput> = raw
            .chunks_exact(2)
            .map(|c| ControlInput::new(c[0], c[1]))
            .collect();
        let policy = if policy_n == 0 {
            HorizonPolicy::Adaptive(AchThresholds::default())
        } else {
            HorizonPolicy::Fixed(policy_n)
        };
        let vp: VehicleParams = (*params).into();
        let trace = multistep_predict(&set.inner, &s0, &us, &policy, &vp, dt).map_err(lib_err)?;
        let out = std::slice::from_raw_parts_mut(states_out, (m + 1) * STATE_DIM);
        for (chunk, st) in out.chunks_exact_mut(STATE_DIM).zip(&trace.states) {
            chunk.copy_from_slice(&st.to_array());
        }
        if !corrected_out.is_null() {
            let flags = std::slice::from_raw_parts_mut(corrected_out, m + 1);
            for (f, &c) in flags.iter_mut().zip(&trace.corrected) {
                *f = u8::from(c);
            }
        }
        Ok(())
    })
}

/// Driving-condition level (0 cruising .. 3 aggressive) under the default
/// thresholds; `delta_w` is the steering-wheel angle in degrees.
///
/// # Safety
/// `level_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dkmgp_classify_condition(
    vx: f64,
    ax: f64,
    delta_w: f64,
    level_out: *mut u32,
) -> DkmgpStatus {
    guard(|| {
        if level_out.is_null() {
            return Err(null("level_out"));
        }
        let c = classify_condition(vx, ax, delta_w, &AchThresholds::default());
        *level_out = c.level() as u32;
        Ok(())
    })
}

/// Correction horizon for a condition level under the default thresholds.
///
/// # Safety
/// `horizon_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dkmgp_ach_horizon(level: u32, horizon_out: *mut usize) -> DkmgpStatus {
    guard(|| {
        if horizon_out.is_null() {
            return Err(null("horizon_out"));
        }
        let cond = *DrivingCondition::ALL
            .get(level as usize)
            .ok_or_else(|| fail(DkmgpStatus::InvalidArgument, format!("level {level} > 3")))?;
        *horizon_out = ach_horizon(cond, &AchThresholds::default());
        Ok(())
    })
}
