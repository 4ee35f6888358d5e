use std::ffi::{CStr, CString};
use std::ptr;

use softgrasp_ffi::*;

fn last_error() -> String {
    let p = sg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const IDENTITY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

#[test]
fn trajectory_round_trip() {
    let bc = SgBoundaryConditions {
        x0: SgVec3::default(),
        xg: SgVec3 { x: 1.0, y: 0.0, z: 0.0 },
        vg: SgVec3 { x: 1.0, y: 0.0, z: 0.0 },
        xf: SgVec3 { x: 2.0, y: 0.0, z: 0.0 },
        tg: 2.0,
        tf: 4.0,
    };
    let mut traj = ptr::null_mut();
    unsafe {
        assert_eq!(sg_trajectory_plan(&bc, &mut traj), SgStatus::Ok);
        let mut sp = SgSetpoint::default();
        assert_eq!(sg_trajectory_eval(traj, 2.0, &mut sp), SgStatus::Ok);
        assert!((sp.position.x - 1.0).abs() < 1e-9);
        assert!((sp.velocity.x - 1.0).abs() < 1e-9);
        let mut cost = 0.0;
        assert_eq!(sg_trajectory_snap_cost(traj, &mut cost), SgStatus::Ok);
        assert!(cost > 0.0);
        assert_eq!(sg_trajectory_eval(traj, f64::NAN, &mut sp), SgStatus::InvalidArgument);
        sg_trajectory_free(traj);
        sg_trajectory_free(ptr::null_mut());
    }
}

#[test]
fn null_arguments_reported() {
    unsafe {
        assert_eq!(sg_trajectory_plan(ptr::null(), ptr::null_mut()), SgStatus::NullPointer);
        assert!(last_error().contains("bc"));
        assert_eq!(
            sg_smoother_solve(ptr::null_mut(), ptr::null_mut()),
            SgStatus::NullPointer
        );
    }
}

#[test]
fn smoother_errors_map_to_codes() {
    let mut sm = ptr::null_mut();
    unsafe {
        let bad = CString::new(r#"{"window": 1}"#).unwrap();
        assert_eq!(sg_smoother_new(bad.as_ptr(), &mut sm), SgStatus::InvalidArgument);
        let unknown = CString::new(r#"{"windw": 5}"#).unwrap();
        assert_eq!(sg_smoother_new(unknown.as_ptr(), &mut sm), SgStatus::InvalidArgument);
        let cfg = CString::new(r#"{"window": 5}"#).unwrap();
        assert_eq!(sg_smoother_new(cfg.as_ptr(), &mut sm), SgStatus::Ok);
        assert_eq!(sg_smoother_solve(sm, ptr::null_mut()), SgStatus::NotReady);
        let mut pose = SgPose {
            rotation: IDENTITY,
            translation: SgVec3::default(),
        };
        assert_eq!(sg_smoother_push(sm, &pose, 1.0), SgStatus::Ok);
        assert_eq!(sg_smoother_push(sm, &pose, 0.5), SgStatus::InvalidArgument);
        pose.rotation[0] = 2.0;
        assert_eq!(sg_smoother_push(sm, &pose, 2.0), SgStatus::InvalidArgument);
        let mut iterations = 0;
        assert_eq!(sg_smoother_solve(sm, &mut iterations), SgStatus::Ok);
        sg_smoother_free(sm);
    }
}

#[test]
fn registration_identifies_outliers() {
    let model: Vec<f64> = (0..10)
        .flat_map(|i| {
            let a = i as f64;
            [0.1 * (a * 1.3).sin(), 0.1 * (a * 0.7).cos(), 0.02 * a]
        })
        .collect();
    let shift = [0.3, -0.2, 1.0];
    let mut observed: Vec<f64> = model.iter().enumerate().map(|(i, v)| v - shift[i % 3]).collect();
    observed[27] += 0.4;
    observed[29] -= 0.3;
    let mut out = SgRegistration::default();
    let mut mask = [true; 10];
    unsafe {
        let status = sg_register(
            model.as_ptr(),
            observed.as_ptr(),
            10,
            0.01,
            1,
            &mut out,
            mask.as_mut_ptr(),
        );
        assert_eq!(status, SgStatus::Ok);
    }
    assert_eq!(out.inlier_count, 9);
    assert!(!mask[9] && mask[..9].iter().all(|m| *m));
    let t = [out.translation.x, out.translation.y, out.translation.z];
    for k in 0..3 {
        assert!((t[k] - shift[k]).abs() < 1e-9);
    }
    assert!(out.converged);
}

#[test]
fn registration_failures() {
    let model = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let observed = [0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 7.0];
    let mut out = SgRegistration::default();
    unsafe {
        let s = sg_register(model.as_ptr(), observed.as_ptr(), 4, 1e-6, 0, &mut out, ptr::null_mut());
        assert_eq!(s, SgStatus::Numerical);
        let s = sg_register(model.as_ptr(), observed.as_ptr(), 2, 0.01, 0, &mut out, ptr::null_mut());
        assert_eq!(s, SgStatus::InvalidArgument);
    }
}

#[test]
fn bounds_and_validation() {
    let g = SgGripperDims {
        delta1: 0.234,
        delta2: 0.098,
        delta3: 0.152,
    };
    let mut b = SgAxes::default();
    unsafe {
        assert_eq!(sg_error_bounds(&g, 0.10, 0.12, &mut b), SgStatus::Ok);
        assert!((b.longitudinal - 0.067).abs() < 1e-15);
        assert!((b.lateral - 0.011).abs() < 1e-15);
        assert_eq!(sg_error_bounds(&g, -0.1, 0.12, &mut b), SgStatus::InvalidArgument);
    }
}

#[test]
fn scenario_from_json() {
    let json = CString::new(
        r#"{
            "target": {"kind": "static", "position": [0.0, 0.0, 0.5]},
            "grasp_speed": 1.0,
            "approach": {
                "start_offset": [-1.375, 0.0, 0.55],
                "grasp_offset": [0.0, 0.0, 0.25],
                "final_offset": [1.0, 0.0, 0.75],
                "tg": 2.5,
                "tf": 4.5
            },
            "seed": 3
        }"#,
    )
    .unwrap();
    let mut out = SgGraspSummary::default();
    unsafe {
        assert_eq!(sg_simulate_json(json.as_ptr(), &mut out), SgStatus::Ok);
        assert!(out.grasped);
        assert!((out.t - 2.5).abs() < 0.1);
        assert!(out.tracking_error.lateral.abs() < 0.02);
        let bad = CString::new("{}").unwrap();
        assert_eq!(sg_simulate_json(bad.as_ptr(), &mut out), SgStatus::InvalidArgument);
    }
}
