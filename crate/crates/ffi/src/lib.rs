//! C ABI for the forced variational integrators.
//!
//! Objects are opaque handles returned through out-pointers by constructors and
//! released with the matching `*_free`. Every fallible call returns an
//! [`FviStatus`]; on failure [`fvi_last_error_message`] describes the cause.
//! Matrices are dense row-major `n * n` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fvi::continuous::{forced_el_acceleration, StateTangent};
use fvi::experiments::{
    benchmark_damped_linear, benchmark_van_der_pol, run_convergence, Benchmark, Family, IntegratorSpec, Ladder,
};
use fvi::{Error, IdentityMode, SolverConfig, TrajectoryRecord};
use nalgebra::DMatrix;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FviStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalFailure = 3,
    Panic = 4,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FviFamily {
    /// Two-point rule evaluated at `(1 - alpha) q0 + alpha q1`.
    Alpha = 0,
    /// Galerkin rule with Lobatto quadrature, 2 to 5 stages.
    Lobatto = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FviMode {
    /// Newton in the doubled space.
    Full = 0,
    /// Newton on the identities only.
    Restricted = 1,
}

/// Integrator selection. `family` holds an [`FviFamily`] value and `mode`
/// an [`FviMode`] value. `alpha` is read for the alpha family, `stages`
/// for the Lobatto family.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FviMethod {
    pub family: u32,
    pub alpha: f64,
    pub stages: u32,
    pub mode: u32,
    pub newton_tol: f64,
    pub max_iters: u32,
}

/// A forced mechanical system with its default initial data.
pub struct FviSystem {
    bench: Benchmark,
}

/// A computed discrete trajectory.
pub struct FviTrajectory {
    record: TrajectoryRecord,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FviStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_)
            | Error::NonFinite(_)
            | Error::BadMass
            | Error::DimensionMismatch { .. }
            | Error::StepTooSmall { .. }
            | Error::GridMismatch => FviStatus::InvalidArgument,
            _ => FviStatus::NumericalFailure,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(FviStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FviStatus::InvalidArgument, msg.into())
}

/// Runs `body`, recording errors and converting panics.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> FviStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FviStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FviStatus::Panic
        }
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn spec(method: &FviMethod) -> Result<IntegratorSpec, Failure> {
    let family = match method.family {
        f if f == FviFamily::Alpha as u32 => {
            if !(0.0..=1.0).contains(&method.alpha) {
                return Err(invalid(format!("alpha must be in [0, 1], got {}", method.alpha)));
            }
            Family::Alpha(method.alpha)
        }
        f if f == FviFamily::Lobatto as u32 => {
            if !(2..=5).contains(&method.stages) {
                return Err(invalid(format!("stages must be in 2..5, got {}", method.stages)));
            }
            Family::Lobatto(method.stages as usize)
        }
        f => return Err(invalid(format!("unknown method family {f}"))),
    };
    let mode = match method.mode {
        m if m == FviMode::Full as u32 => IdentityMode::Full,
        m if m == FviMode::Restricted as u32 => IdentityMode::Restricted,
        m => return Err(invalid(format!("unknown mode {m}"))),
    };
    let solver = SolverConfig {
        newton_tol: method.newton_tol,
        max_iters: method.max_iters as usize,
        mode,
    };
    solver.validate()?;
    Ok(IntegratorSpec { family, solver })
}

/// Default method: implicit midpoint, full doubled solve, tolerance 1e-12.
#[no_mangle]
pub extern "C" fn fvi_method_default() -> FviMethod {
    let s = SolverConfig::default();
    FviMethod {
        family: FviFamily::Alpha as u32,
        alpha: 0.5,
        stages: 2,
        mode: FviMode::Full as u32,
        newton_tol: s.newton_tol,
        max_iters: s.max_iters as u32,
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fvi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Two coupled van der Pol oscillators.
#[no_mangle]
pub extern "C" fn fvi_system_van_der_pol(eps: f64, rho: f64, lambda: f64, out: *mut *mut FviSystem) -> FviStatus {
    guard(|| {
        let bench = benchmark_van_der_pol(eps, rho, lambda)?;
        store(out, FviSystem { bench })
    })
}

/// `M q'' + D q' + K q = 0` with `n * n` row-major matrices.
///
/// # Safety
/// Each matrix pointer must reference `n * n` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn fvi_system_damped_linear(
    n: usize,
    mass: *const f64,
    damping: *const f64,
    stiffness: *const f64,
    out: *mut *mut FviSystem,
) -> FviStatus {
    guard(|| {
        if n == 0 {
            return Err(invalid("dimension must be positive"));
        }
        let m = DMatrix::from_row_slice(n, n, input(mass, n * n, "mass")?);
        let d = DMatrix::from_row_slice(n, n, input(damping, n * n, "damping")?);
        let k = DMatrix::from_row_slice(n, n, input(stiffness, n * n, "stiffness")?);
        let bench = benchmark_damped_linear(m, d, k)?;
        store(out, FviSystem { bench })
    })
}

/// # Safety
/// `sys` must come from a system constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fvi_system_free(sys: *mut FviSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Configuration dimension, or 0 for a null handle.
///
/// # Safety
/// `sys` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fvi_system_dim(sys: *const FviSystem) -> usize {
    sys.as_ref().map_or(0, |s| s.bench.dim())
}

/// Forced Euler-Lagrange acceleration at `(q, v)`.
///
/// # Safety
/// `q`, `v` and `out` must reference `n` doubles; `n` must equal the system dimension.
#[no_mangle]
pub unsafe extern "C" fn fvi_forced_acceleration(
    sys: *const FviSystem,
    q: *const f64,
    v: *const f64,
    n: usize,
    out: *mut f64,
) -> FviStatus {
    guard(|| {
        let sys = handle(sys, "sys")?;
        if n != sys.bench.dim() {
            return Err(invalid(format!("expected dimension {}, got {n}", sys.bench.dim())));
        }
        let s = StateTangent::new(input(q, n, "q")?.to_vec(), input(v, n, "v")?.to_vec());
        let a = forced_el_acceleration(&sys.bench.system, &s)?;
        output(out, n, "out")?.copy_from_slice(&a);
        Ok(())
    })
}

/// Integrates `steps` steps of size `h` from `(q0, v0)`.
///
/// # Safety
/// `q0` and `v0` must reference `n` doubles; `method` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fvi_integrate(
    sys: *const FviSystem,
    method: *const FviMethod,
    q0: *const f64,
    v0: *const f64,
    n: usize,
    steps: usize,
    h: f64,
    out: *mut *mut FviTrajectory,
) -> FviStatus {
    guard(|| {
        let sys = handle(sys, "sys")?;
        let spec = spec(handle(method, "method")?)?;
        if n != sys.bench.dim() {
            return Err(invalid(format!("expected dimension {}, got {n}", sys.bench.dim())));
        }
        let s0 = StateTangent::new(input(q0, n, "q0")?.to_vec(), input(v0, n, "v0")?.to_vec());
        let record = spec.run(&sys.bench.system, &s0, steps, h)?;
        store(out, FviTrajectory { record })
    })
}

/// # Safety
/// `traj` must come from [`fvi_integrate`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fvi_trajectory_free(traj: *mut FviTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Number of stored states (steps + 1), or 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fvi_trajectory_len(traj: *const FviTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.record.len())
}

/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fvi_trajectory_dim(traj: *const FviTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.record.dim())
}

/// Time, position, momentum and energy of state `k`. Any of the output
/// pointers may be null to skip that quantity.
///
/// # Safety
/// `q` and `p` must be null or reference `fvi_trajectory_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn fvi_trajectory_state(
    traj: *const FviTrajectory,
    k: usize,
    t: *mut f64,
    q: *mut f64,
    p: *mut f64,
    energy: *mut f64,
) -> FviStatus {
    guard(|| {
        let rec = &handle(traj, "traj")?.record;
        if k >= rec.len() {
            return Err(invalid(format!("index {k} out of range for {} states", rec.len())));
        }
        let n = rec.dim();
        if !t.is_null() {
            *t = rec.times[k];
        }
        if !q.is_null() {
            output(q, n, "q")?.copy_from_slice(&rec.q[k]);
        }
        if !p.is_null() {
            output(p, n, "p")?.copy_from_slice(&rec.p[k]);
        }
        if !energy.is_null() {
            *energy = rec.energy[k];
        }
        Ok(())
    })
}

/// Largest `max |q - Q|` along the trajectory, or NaN for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fvi_trajectory_max_identity_defect(traj: *const FviTrajectory) -> f64 {
    traj.as_ref().map_or(f64::NAN, |t| t.record.max_identity_defect())
}

/// Fitted log-log slope of the final-state error over a step ladder from
/// the system's default initial state. `r2` may be null.
///
/// # Safety
/// `slope` must be writable; `r2` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fvi_convergence_slope(
    sys: *const FviSystem,
    method: *const FviMethod,
    h_max: f64,
    h_min: f64,
    points: usize,
    slope: *mut f64,
    r2: *mut f64,
) -> FviStatus {
    guard(|| {
        let sys = handle(sys, "sys")?;
        let spec = spec(handle(method, "method")?)?;
        if slope.is_null() {
            return Err(null("slope"));
        }
        let ladder = Ladder { h_max, h_min, points };
        let study = run_convergence(&sys.bench, &spec, &ladder)?;
        if study.fit.is_none() {
            return Err(Failure(FviStatus::NumericalFailure, "too few points left for a slope fit".into()));
        }
        *slope = study.slope();
        if !r2.is_null() {
            *r2 = study.r2();
        }
        Ok(())
    })
}
