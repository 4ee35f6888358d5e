//! C ABI over `softgrasp`.
//!
//! Every function returns an [`SgStatus`]. On failure a message describing
//! the error is kept per thread and can be read with
//! [`sg_last_error_message`]. Objects with state (trajectories and
//! smoothers) are opaque handles created by `*_new`/`*_plan` functions and
//! released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{Matrix3, Vector3};
use softgrasp::bounds::{error_bounds, GripperDims, TargetDims};
use softgrasp::geometry::{Pose, Rotation, Twist};
use softgrasp::registration::{solve_tls, CorrespondenceSet};
use softgrasp::sim::{run_scenario, Scenario};
use softgrasp::smoother::{FixedLagSmoother, SmootherConfig};
use softgrasp::trajectory::{plan_min_snap, BoundaryConditions, PolynomialTrajectory};
use softgrasp::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// A smoother was queried before it produced an estimate.
    NotReady = 3,
    /// Singular systems, missing consensus, divergence, non-convergence.
    Numerical = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<Vector3<f64>> for SgVec3 {
    fn from(v: Vector3<f64>) -> Self {
        SgVec3 { x: v.x, y: v.y, z: v.z }
    }
}

impl From<SgVec3> for Vector3<f64> {
    fn from(v: SgVec3) -> Self {
        Vector3::new(v.x, v.y, v.z)
    }
}

/// Rigid transform. `rotation` is row-major.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgPose {
    pub rotation: [f64; 9],
    pub translation: SgVec3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgTwist {
    pub linear: SgVec3,
    pub angular: SgVec3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgBoundaryConditions {
    pub x0: SgVec3,
    pub xg: SgVec3,
    pub vg: SgVec3,
    pub xf: SgVec3,
    pub tg: f64,
    pub tf: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgSetpoint {
    pub position: SgVec3,
    pub velocity: SgVec3,
    pub acceleration: SgVec3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgRegistration {
    pub rotation: [f64; 9],
    pub translation: SgVec3,
    pub cost: f64,
    pub inlier_count: usize,
    pub converged: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgGripperDims {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgAxes {
    pub longitudinal: f64,
    pub lateral: f64,
    pub vertical: f64,
}

/// Grasp outcome of a simulated scenario. Error fields are zero when
/// `grasped` is false.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgGraspSummary {
    pub grasped: bool,
    pub t: f64,
    pub speed: f64,
    pub tracking_error: SgAxes,
    pub true_error: SgAxes,
}

/// Opaque minimum-snap trajectory.
pub struct SgTrajectory(PolynomialTrajectory);

/// Opaque fixed-lag smoother.
pub struct SgSmoother(FixedLagSmoother);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SgStatus, msg: impl Into<String>) -> SgStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> SgStatus {
    let status = if e.is_numerical() {
        SgStatus::Numerical
    } else if e == Error::NotInitialized {
        SgStatus::NotReady
    } else {
        SgStatus::InvalidArgument
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`SgStatus::Panic`].
fn guard(f: impl FnOnce() -> SgStatus) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SgStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

fn rotation_from_rows(m: &[f64; 9]) -> Result<Rotation, SgStatus> {
    Rotation::from_matrix(Matrix3::from_row_slice(m)).map_err(from_error)
}

fn rows(r: &Rotation) -> [f64; 9] {
    let m = r.matrix();
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(SgStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Plans a minimum-snap trajectory. On success `*out` owns a new handle.
///
/// # Safety
/// `bc` must point to a valid struct and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sg_trajectory_plan(bc: *const SgBoundaryConditions, out: *mut *mut SgTrajectory) -> SgStatus {
    guard(|| {
        non_null!(bc, out);
        let bc = &*bc;
        let bc = BoundaryConditions {
            x0: bc.x0.into(),
            xg: bc.xg.into(),
            vg: bc.vg.into(),
            xf: bc.xf.into(),
            tg: bc.tg,
            tf: bc.tf,
        };
        match plan_min_snap(&bc) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(SgTrajectory(t)));
                SgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Position, velocity and acceleration at time `t`.
///
/// # Safety
/// `traj` must come from [`sg_trajectory_plan`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_trajectory_eval(traj: *const SgTrajectory, t: f64, out: *mut SgSetpoint) -> SgStatus {
    guard(|| {
        non_null!(traj, out);
        if !t.is_finite() {
            return fail(SgStatus::InvalidArgument, "t must be finite");
        }
        let tr = &(*traj).0;
        *out = SgSetpoint {
            position: tr.position(t).into(),
            velocity: tr.velocity(t).into(),
            acceleration: tr.acceleration(t).into(),
        };
        SgStatus::Ok
    })
}

/// Integrated squared snap over the whole trajectory.
///
/// # Safety
/// `traj` must come from [`sg_trajectory_plan`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_trajectory_snap_cost(traj: *const SgTrajectory, out: *mut f64) -> SgStatus {
    guard(|| {
        non_null!(traj, out);
        *out = (*traj).0.snap_cost();
        SgStatus::Ok
    })
}

/// # Safety
/// `traj` must be NULL or come from [`sg_trajectory_plan`], and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_trajectory_free(traj: *mut SgTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Creates a smoother. `config_json` may be NULL for the default
/// configuration, or a JSON object overriding any of its fields.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_smoother_new(config_json: *const c_char, out: *mut *mut SgSmoother) -> SgStatus {
    guard(|| {
        non_null!(out);
        let cfg = if config_json.is_null() {
            SmootherConfig::default()
        } else {
            let text = match CStr::from_ptr(config_json).to_str() {
                Ok(s) => s,
                Err(e) => return fail(SgStatus::InvalidArgument, format!("config is not UTF-8: {e}")),
            };
            match serde_json::from_str(text) {
                Ok(c) => c,
                Err(e) => return fail(SgStatus::InvalidArgument, format!("invalid smoother config: {e}")),
            }
        };
        match FixedLagSmoother::new(cfg) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(SgSmoother(s)));
                SgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Adds a target pose measurement. Stamps must increase.
///
/// # Safety
/// `sm` must come from [`sg_smoother_new`]; `pose` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_smoother_push(sm: *mut SgSmoother, pose: *const SgPose, stamp: f64) -> SgStatus {
    guard(|| {
        non_null!(sm, pose);
        let p = &*pose;
        let r = match rotation_from_rows(&p.rotation) {
            Ok(r) => r,
            Err(s) => return s,
        };
        match (*sm).0.push(Pose::new(r, p.translation.into()), stamp) {
            Ok(()) => SgStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// Re-solves the window. `iterations` may be NULL.
///
/// # Safety
/// `sm` must come from [`sg_smoother_new`].
#[no_mangle]
pub unsafe extern "C" fn sg_smoother_solve(sm: *mut SgSmoother, iterations: *mut usize) -> SgStatus {
    guard(|| {
        non_null!(sm);
        match (*sm).0.solve() {
            Ok(track) => {
                if !iterations.is_null() {
                    *iterations = track.iterations;
                }
                SgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Newest pose and body-frame twist of the last solve.
///
/// # Safety
/// `sm` must come from [`sg_smoother_new`]; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_smoother_latest(sm: *const SgSmoother, pose: *mut SgPose, twist: *mut SgTwist) -> SgStatus {
    guard(|| {
        non_null!(sm, pose, twist);
        match (*sm).0.latest() {
            Ok((p, t)) => {
                *pose = SgPose {
                    rotation: rows(&p.rotation),
                    translation: p.translation.into(),
                };
                *twist = twist_out(&t);
                SgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

fn twist_out(t: &Twist) -> SgTwist {
    SgTwist {
        linear: t.linear.into(),
        angular: t.angular.into(),
    }
}

/// # Safety
/// `sm` must be NULL or come from [`sg_smoother_new`], and must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_smoother_free(sm: *mut SgSmoother) {
    if !sm.is_null() {
        drop(Box::from_raw(sm));
    }
}

/// Robust registration of `n` paired points given as `n * 3` packed
/// coordinates. Finds `R, t` with `model ≈ R * observed + t`. When
/// `inlier_mask` is not NULL it receives `n` flags.
///
/// # Safety
/// `model` and `observed` must hold `3 * n` doubles, `inlier_mask` NULL or
/// `n` writable bools, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_register(
    model: *const f64,
    observed: *const f64,
    n: usize,
    c_bar: f64,
    seed: u64,
    out: *mut SgRegistration,
    inlier_mask: *mut bool,
) -> SgStatus {
    guard(|| {
        non_null!(model, observed, out);
        let points = |p: *const f64| {
            std::slice::from_raw_parts(p, 3 * n)
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect::<Vec<_>>()
        };
        let pairs = match CorrespondenceSet::new(points(model), points(observed)) {
            Ok(p) => p,
            Err(e) => return from_error(e),
        };
        match solve_tls(&pairs, c_bar, seed) {
            Ok(r) => {
                *out = SgRegistration {
                    rotation: rows(&r.rotation),
                    translation: r.translation.into(),
                    cost: r.cost,
                    inlier_count: r.inlier_count(),
                    converged: r.converged,
                };
                if !inlier_mask.is_null() {
                    std::slice::from_raw_parts_mut(inlier_mask, n).copy_from_slice(&r.inlier_mask);
                }
                SgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Per-axis tolerable grasp-point errors. Negative entries mean the object
/// does not fit on that axis.
///
/// # Safety
/// `gripper` must be valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_error_bounds(
    gripper: *const SgGripperDims,
    ell1: f64,
    ell2: f64,
    out: *mut SgAxes,
) -> SgStatus {
    guard(|| {
        non_null!(gripper, out);
        let g = &*gripper;
        let g = GripperDims {
            delta1: g.delta1,
            delta2: g.delta2,
            delta3: g.delta3,
        };
        let t = TargetDims { ell1, ell2, mass: None };
        if let Err(e) = g.validate().and_then(|_| t.validate()) {
            return from_error(e);
        }
        let b = error_bounds(&g, &t);
        *out = SgAxes {
            longitudinal: b.longitudinal,
            lateral: b.lateral,
            vertical: b.vertical,
        };
        SgStatus::Ok
    })
}

/// Runs a scenario given as JSON, in the same format as the CLI scenario
/// documents, and reports the grasp.
///
/// # Safety
/// `scenario_json` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_simulate_json(scenario_json: *const c_char, out: *mut SgGraspSummary) -> SgStatus {
    guard(|| {
        non_null!(scenario_json, out);
        let sc: Scenario = match CStr::from_ptr(scenario_json)
            .to_str()
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str(s).map_err(|e| e.to_string()))
        {
            Ok(sc) => sc,
            Err(e) => return fail(SgStatus::InvalidArgument, format!("invalid scenario: {e}")),
        };
        match run_scenario(&sc) {
            Ok(trace) => {
                let axes = |a: &softgrasp::sim::AxisTriple| SgAxes {
                    longitudinal: a.longitudinal,
                    lateral: a.lateral,
                    vertical: a.vertical,
                };
                *out = match &trace.grasp {
                    Some(g) => SgGraspSummary {
                        grasped: true,
                        t: g.t,
                        speed: g.speed,
                        tracking_error: axes(&g.tracking_error),
                        true_error: axes(&g.true_error),
                    },
                    None => SgGraspSummary::default(),
                };
                SgStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
