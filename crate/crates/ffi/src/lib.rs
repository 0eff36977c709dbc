//! C ABI over `aoi-core`.
//!
//! Models and solutions are opaque heap handles created by `aoi_*` functions
//! and released by the matching `*_free`. Every fallible call returns an
//! [`AoiStatus`]; on failure `aoi_last_error_message` describes the error for
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use aoi_core::decomp::{default_base_scheduling, solve_decomposed, DecomposedSolution};
use aoi_core::exact::{extract_policy, rvia_solve, Policy, ValueTable};
use aoi_core::fleet::FleetFile;
use aoi_core::sim::{simulate, ActionSource, BasePolicy, GreedyPolicy, SimConfig, SuboptimalPolicy, TablePolicy};
use aoi_core::{DeviceState, Error, SystemModel, SystemState};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AoiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    NonConvergence = 3,
    BudgetExceeded = 4,
    InvalidArgument = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AoiPolicyKind {
    Optimal = 0,
    Suboptimal = 1,
    Base = 2,
    Greedy = 3,
}

impl AoiPolicyKind {
    fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Self::Optimal,
            1 => Self::Suboptimal,
            2 => Self::Base,
            3 => Self::Greedy,
            _ => return None,
        })
    }
}

/// One device's state; `a_b` is ignored outside the random-arrival variant.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AoiDeviceState {
    pub a_b: u32,
    pub a_d: u32,
    pub a_r: u32,
    pub d: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AoiSimSummary {
    pub overall_mean: f64,
    pub std_error: f64,
}

pub struct AoiModel {
    fleet: FleetFile,
    model: Arc<SystemModel>,
}

pub struct AoiOptimal {
    model: Arc<SystemModel>,
    values: ValueTable,
    policy: Policy,
}

pub struct AoiSuboptimal {
    model: Arc<SystemModel>,
    solution: DecomposedSolution,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AoiStatus {
    match e {
        Error::InvalidConfig(_) => AoiStatus::InvalidConfig,
        Error::NonConvergence { .. } => AoiStatus::NonConvergence,
        Error::BudgetExceeded(_) => AoiStatus::BudgetExceeded,
        Error::StateOutOfRange(_) | Error::InfeasibleAction(_) => AoiStatus::InvalidArgument,
        _ => AoiStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AoiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AoiStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AoiStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            AoiStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: the caller passes either null or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller passes either null or a valid, writable pointer.
    unsafe { p.as_mut() }.ok_or(Failure::Null(what))
}

unsafe fn read_states(model: &SystemModel, states: *const AoiDeviceState, n: usize) -> Result<SystemState, Failure> {
    if states.is_null() {
        return Err(Failure::Null("states"));
    }
    if n != model.k() {
        return Err(Error::StateOutOfRange(format!("{n} device states for {} devices", model.k())).into());
    }
    // SAFETY: `states` points to `n` readable entries per the API contract.
    let slice = unsafe { std::slice::from_raw_parts(states, n) };
    Ok(SystemState::new(slice.iter().map(|s| DeviceState::with_buffer(s.a_b, s.a_d, s.a_r, s.d)).collect()))
}

unsafe fn write_actions(actions: &[aoi_core::DeviceAction], out: *mut u8) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("actions_out"));
    }
    for (i, a) in actions.iter().enumerate() {
        // SAFETY: `out` has room for one code per device per the API contract.
        unsafe { *out.add(i) = *a as u8 };
    }
    Ok(())
}

/// Parses a NUL-terminated TOML fleet description.
///
/// # Safety
/// `toml` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn aoi_model_from_toml(toml: *const c_char, out: *mut *mut AoiModel) -> AoiStatus {
    guard(|| {
        if toml.is_null() {
            return Err(Failure::Null("toml"));
        }
        let out = unsafe { out_ref(out, "out")? };
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let text =
            unsafe { CStr::from_ptr(toml) }.to_str().map_err(|_| Error::InvalidConfig("config is not UTF-8".into()))?;
        let fleet = FleetFile::parse(text)?;
        let model = Arc::new(SystemModel::new(fleet.system_config()?)?);
        *out = Box::into_raw(Box::new(AoiModel { fleet, model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `aoi_model_from_toml` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aoi_model_free(model: *mut AoiModel) {
    if !model.is_null() {
        // SAFETY: the pointer came from Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aoi_model_device_count(model: *const AoiModel, out: *mut usize) -> AoiStatus {
    guard(|| {
        let m = unsafe { deref(model, "model")? };
        *unsafe { out_ref(out, "out")? } = m.model.k();
        Ok(())
    })
}

/// Writes the joint state count; fails with `BUDGET_EXCEEDED` on overflow.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aoi_model_joint_state_count(model: *const AoiModel, out: *mut u64) -> AoiStatus {
    guard(|| {
        let m = unsafe { deref(model, "model")? };
        let n = m.model.require_joint_states(usize::MAX)?;
        *unsafe { out_ref(out, "out")? } = n as u64;
        Ok(())
    })
}

/// Solves the joint problem with the solver settings of the fleet file.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aoi_solve_optimal(model: *const AoiModel, out: *mut *mut AoiOptimal) -> AoiStatus {
    guard(|| {
        let m = unsafe { deref(model, "model")? };
        let out = unsafe { out_ref(out, "out")? };
        let values = rvia_solve(&m.model, &m.fleet.solver)?;
        let policy = extract_policy(&m.model, &values)?;
        *out = Box::into_raw(Box::new(AoiOptimal { model: Arc::clone(&m.model), values, policy }));
        Ok(())
    })
}

/// # Safety
/// `solution` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aoi_optimal_theta(solution: *const AoiOptimal, out: *mut f64) -> AoiStatus {
    guard(|| {
        let s = unsafe { deref(solution, "solution")? };
        *unsafe { out_ref(out, "out")? } = s.values.theta;
        Ok(())
    })
}

/// Optimal action for `n` device states; writes one code per device
/// (0 idle, 1 continue, 2 fresh) to `actions_out`.
///
/// # Safety
/// `states` must hold `n` entries and `actions_out` room for `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn aoi_optimal_action(
    solution: *const AoiOptimal,
    states: *const AoiDeviceState,
    n: usize,
    actions_out: *mut u8,
) -> AoiStatus {
    guard(|| {
        let s = unsafe { deref(solution, "solution")? };
        let x = unsafe { read_states(&s.model, states, n)? };
        let idx = s.model.encode(&x)?;
        unsafe { write_actions(&s.policy.action(&s.model, idx).0, actions_out) }
    })
}

/// # Safety
/// `solution` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aoi_optimal_free(solution: *mut AoiOptimal) {
    if !solution.is_null() {
        // SAFETY: the pointer came from Box::into_raw in this library.
        drop(unsafe { Box::from_raw(solution) });
    }
}

/// Solves the per-device problems under the fleet's base policy.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aoi_suboptimal_solve(model: *const AoiModel, out: *mut *mut AoiSuboptimal) -> AoiStatus {
    guard(|| {
        let m = unsafe { deref(model, "model")? };
        let out = unsafe { out_ref(out, "out")? };
        let p_u = match &m.fleet.base {
            Some(b) => b.p_u.clone(),
            None => default_base_scheduling(m.model.config()),
        };
        let solution = solve_decomposed(&m.model, &p_u, &m.fleet.solver)?;
        *out = Box::into_raw(Box::new(AoiSuboptimal { model: Arc::clone(&m.model), solution }));
        Ok(())
    })
}

/// Average cost of the base policy (sum of per-device averages).
///
/// # Safety
/// `solution` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aoi_suboptimal_theta_base(solution: *const AoiSuboptimal, out: *mut f64) -> AoiStatus {
    guard(|| {
        let s = unsafe { deref(solution, "solution")? };
        *unsafe { out_ref(out, "out")? } = s.solution.theta_base();
        Ok(())
    })
}

/// Improved-policy action; same conventions as `aoi_optimal_action`.
///
/// # Safety
/// `states` must hold `n` entries and `actions_out` room for `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn aoi_suboptimal_action(
    solution: *const AoiSuboptimal,
    states: *const AoiDeviceState,
    n: usize,
    actions_out: *mut u8,
) -> AoiStatus {
    guard(|| {
        let s = unsafe { deref(solution, "solution")? };
        let x = unsafe { read_states(&s.model, states, n)? };
        let local = s.model.local_of(&x)?;
        let w = s.solution.suboptimal_action_local(&s.model, &local);
        unsafe { write_actions(&w.0, actions_out) }
    })
}

/// # Safety
/// `solution` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aoi_suboptimal_free(solution: *mut AoiSuboptimal) {
    if !solution.is_null() {
        // SAFETY: the pointer came from Box::into_raw in this library.
        drop(unsafe { Box::from_raw(solution) });
    }
}

/// Simulates the policy with code `policy` (an [`AoiPolicyKind`] value);
/// burn-in is a tenth of the horizon.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aoi_simulate(
    model: *const AoiModel,
    policy: u32,
    seed: u64,
    horizon: u64,
    replications: u32,
    out: *mut AoiSimSummary,
) -> AoiStatus {
    guard(|| {
        let m = unsafe { deref(model, "model")? };
        let out = unsafe { out_ref(out, "out")? };
        let policy = AoiPolicyKind::from_code(policy)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy code {policy}")))?;
        let sim = SimConfig { horizon, replications, seed, burn_in: horizon / 10, trajectory_slots: 0 };
        let result = match policy {
            AoiPolicyKind::Optimal => {
                m.model.require_joint_states(m.fleet.solver.max_states)?;
                let values = rvia_solve(&m.model, &m.fleet.solver)?;
                let table = extract_policy(&m.model, &values)?;
                simulate(&TablePolicy(&table), &m.model, &sim)?
            }
            other => {
                let p_u = match &m.fleet.base {
                    Some(b) => b.p_u.clone(),
                    None => default_base_scheduling(m.model.config()),
                };
                let sol = solve_decomposed(&m.model, &p_u, &m.fleet.solver)?;
                let source: Box<dyn ActionSource> = match other {
                    AoiPolicyKind::Suboptimal => Box::new(SuboptimalPolicy(&sol)),
                    AoiPolicyKind::Base => Box::new(BasePolicy(&sol)),
                    _ => Box::new(GreedyPolicy(&sol)),
                };
                simulate(source.as_ref(), &m.model, &sim)?
            }
        };
        *out = AoiSimSummary { overall_mean: result.overall_mean, std_error: result.std_error };
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aoi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}
