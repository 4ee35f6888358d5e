//! Minimum-snap grasp trajectories and moving-frame setpoint transforms.
//!
//! Each axis is a single degree-10 polynomial on `[0, tf]` constrained at
//! start, grasp and terminal time. The equality constrained QP has no
//! inequalities, so it is solved exactly through its KKT system. Time is
//! normalized to `[0, 1]` while solving and the coefficients are rescaled to
//! absolute time afterwards.

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rotation;

/// Polynomial degree of each axis.
pub const DEGREE: usize = 10;
/// Number of coefficients per axis.
pub const N_COEFFS: usize = DEGREE + 1;
/// Equality constraints per axis.
pub const N_CONSTRAINTS: usize = 9;
/// Minimum separation between constraint times.
pub const MIN_SEGMENT: f64 = 0.01;

pub type Coeffs = SVector<f64, N_COEFFS>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConditions {
    pub x0: Vector3<f64>,
    pub xg: Vector3<f64>,
    pub vg: Vector3<f64>,
    pub xf: Vector3<f64>,
    pub tg: f64,
    pub tf: f64,
}

impl BoundaryConditions {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.xg, self.vg, self.xf]
            .iter()
            .flat_map(|v| v.iter())
            .chain([self.tg, self.tf].iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("boundary", "non-finite value"));
        }
        if self.tg <= MIN_SEGMENT {
            return Err(Error::DegenerateTiming(format!(
                "tg = {} must exceed {MIN_SEGMENT} s",
                self.tg
            )));
        }
        if self.tf - self.tg <= MIN_SEGMENT {
            return Err(Error::DegenerateTiming(format!(
                "tf - tg = {} must exceed {MIN_SEGMENT} s",
                self.tf - self.tg
            )));
        }
        Ok(())
    }

    /// Right hand side of the constraint system for one axis, in absolute
    /// units: `[p(0), v(0), a(0), p(tg), v(tg), a(tg), p(tf), v(tf), a(tf)]`.
    pub fn targets(&self, axis: usize) -> SVector<f64, N_CONSTRAINTS> {
        SVector::<f64, N_CONSTRAINTS>::from_column_slice(&[
            self.x0[axis],
            0.0,
            0.0,
            self.xg[axis],
            self.vg[axis],
            0.0,
            self.xf[axis],
            0.0,
            0.0,
        ])
    }
}

/// Position, velocity and acceleration setpoint with yaw.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Setpoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub yaw: f64,
}

/// Kinematics of a moving frame relative to the fixed frame, all expressed
/// in the fixed frame.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub rotation: Rotation,
    pub angular_velocity: Vector3<f64>,
    #[serde(default)]
    pub angular_acceleration: Vector3<f64>,
}

impl FrameState {
    pub fn stationary(position: Vector3<f64>, rotation: Rotation) -> Self {
        FrameState {
            position,
            rotation,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialTrajectory {
    /// Per-axis coefficients in ascending powers of absolute time.
    pub coeffs: [Coeffs; 3],
    pub tg: f64,
    pub tf: f64,
}

/// `d^k/dt^k t^i` evaluated at `t`, for all `i`.
pub(crate) fn basis_row(t: f64, k: usize) -> Coeffs {
    let mut row = Coeffs::zeros();
    for i in k..N_COEFFS {
        let mut c = 1.0;
        for j in 0..k {
            c *= (i - j) as f64;
        }
        row[i] = c * t.powi((i - k) as i32);
    }
    row
}

/// Exact Gram matrix of the 4th-derivative monomials on `[0, 1]`.
pub(crate) fn snap_hessian_unit() -> SMatrix<f64, N_COEFFS, N_COEFFS> {
    let mut h = SMatrix::<f64, N_COEFFS, N_COEFFS>::zeros();
    let c = |i: usize| (i * (i - 1) * (i - 2) * (i - 3)) as f64;
    for i in 4..N_COEFFS {
        for j in 4..N_COEFFS {
            h[(i, j)] = c(i) * c(j) / (i + j - 7) as f64;
        }
    }
    h
}

/// Constraint matrix on the unit interval for constraint times `τg`, 1.
fn constraint_matrix_unit(tau_g: f64) -> SMatrix<f64, N_CONSTRAINTS, N_COEFFS> {
    let mut a = SMatrix::<f64, N_CONSTRAINTS, N_COEFFS>::zeros();
    for (block, tau) in [0.0, tau_g, 1.0].into_iter().enumerate() {
        for k in 0..3 {
            a.set_row(block * 3 + k, &basis_row(tau, k).transpose());
        }
    }
    a
}

/// Full KKT solution of one planning problem, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct KktSolution {
    /// `[H Aᵀ; A 0]` on the unit interval.
    pub kkt: DMatrix<f64>,
    pub hessian: SMatrix<f64, N_COEFFS, N_COEFFS>,
    pub constraints: SMatrix<f64, N_CONSTRAINTS, N_COEFFS>,
    /// Per axis, normalized coefficients followed by multipliers.
    pub solutions: [DVector<f64>; 3],
    pub rhs: [SVector<f64, N_CONSTRAINTS>; 3],
}

/// Solves the per-axis KKT systems. Exposed for verification; most callers
/// want [`plan_min_snap`].
pub fn solve_kkt(bc: &BoundaryConditions) -> Result<KktSolution> {
    bc.validate()?;
    let tf = bc.tf;
    let tau_g = bc.tg / tf;
    let h = snap_hessian_unit();
    let a = constraint_matrix_unit(tau_g);

    let n = N_COEFFS + N_CONSTRAINTS;
    let mut kkt = DMatrix::<f64>::zeros(n, n);
    kkt.view_mut((0, 0), (N_COEFFS, N_COEFFS)).copy_from(&h);
    kkt.view_mut((0, N_COEFFS), (N_COEFFS, N_CONSTRAINTS))
        .copy_from(&a.transpose());
    kkt.view_mut((N_COEFFS, 0), (N_CONSTRAINTS, N_COEFFS)).copy_from(&a);

    let lu = kkt.clone().lu();
    // Scale of derivative k in normalized time is tf^k.
    let scale = [1.0, tf, tf * tf];
    let mut solutions: [DVector<f64>; 3] = Default::default();
    let mut rhs_all = [SVector::<f64, N_CONSTRAINTS>::zeros(); 3];
    for axis in 0..3 {
        let mut b = bc.targets(axis);
        for (i, v) in b.iter_mut().enumerate() {
            *v *= scale[i % 3];
        }
        let mut rhs = DVector::<f64>::zeros(n);
        rhs.rows_mut(N_COEFFS, N_CONSTRAINTS).copy_from(&b);
        let sol = lu.solve(&rhs).ok_or_else(|| {
            Error::DegenerateTiming(format!("KKT system singular for tg = {}, tf = {}", bc.tg, bc.tf))
        })?;
        if !sol.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateTiming("KKT solution not finite".into()));
        }
        solutions[axis] = sol;
        rhs_all[axis] = b;
    }
    Ok(KktSolution {
        kkt,
        hessian: h,
        constraints: a,
        solutions,
        rhs: rhs_all,
    })
}

/// Plans the minimum-snap trajectory through the grasp point.
pub fn plan_min_snap(bc: &BoundaryConditions) -> Result<PolynomialTrajectory> {
    let kkt = solve_kkt(bc)?;
    let mut coeffs = [Coeffs::zeros(); 3];
    for axis in 0..3 {
        let mut inv_scale = 1.0;
        for i in 0..N_COEFFS {
            coeffs[axis][i] = kkt.solutions[axis][i] * inv_scale;
            inv_scale /= bc.tf;
        }
    }
    Ok(PolynomialTrajectory {
        coeffs,
        tg: bc.tg,
        tf: bc.tf,
    })
}

impl PolynomialTrajectory {
    fn clamp(&self, t: f64) -> f64 {
        t.clamp(0.0, self.tf)
    }

    /// `k`-th derivative of all three axes at `t`, with `t` clamped into
    /// `[0, tf]`.
    pub fn derivative(&self, t: f64, k: usize) -> Vector3<f64> {
        let t = self.clamp(t);
        Vector3::from_fn(|axis, _| {
            let c = &self.coeffs[axis];
            // Horner on the differentiated coefficients.
            let mut acc = 0.0;
            for i in (k..N_COEFFS).rev() {
                let mut f = 1.0;
                for j in 0..k {
                    f *= (i - j) as f64;
                }
                acc = acc * t + f * c[i];
            }
            acc
        })
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.derivative(t, 0)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        self.derivative(t, 1)
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        self.derivative(t, 2)
    }

    pub fn jerk(&self, t: f64) -> Vector3<f64> {
        self.derivative(t, 3)
    }

    pub fn snap(&self, t: f64) -> Vector3<f64> {
        self.derivative(t, 4)
    }

    /// Setpoint at `t` with zero yaw. Outside `[0, tf]` the endpoint values
    /// are returned, which at `tf` is a hover.
    pub fn eval(&self, t: f64) -> Setpoint {
        Setpoint {
            position: self.position(t),
            velocity: self.velocity(t),
            acceleration: self.acceleration(t),
            yaw: 0.0,
        }
    }

    /// `∫₀^tf ‖p⁗(t)‖² dt`, summed over axes, in closed form.
    pub fn snap_cost(&self) -> f64 {
        let c = |i: usize| (i * (i - 1) * (i - 2) * (i - 3)) as f64;
        let mut total = 0.0;
        for axis in 0..3 {
            let a = &self.coeffs[axis];
            for i in 4..N_COEFFS {
                for j in 4..N_COEFFS {
                    let p = (i + j - 7) as i32;
                    total += a[i] * a[j] * c(i) * c(j) * self.tf.powi(p) / p as f64;
                }
            }
        }
        total
    }

    /// Residuals of all 27 boundary constraints against `bc`.
    pub fn constraint_residuals(&self, bc: &BoundaryConditions) -> [[f64; N_CONSTRAINTS]; 3] {
        let mut out = [[0.0; N_CONSTRAINTS]; 3];
        for (axis, row) in out.iter_mut().enumerate() {
            let b = bc.targets(axis);
            for (block, t) in [0.0, self.tg, self.tf].into_iter().enumerate() {
                for k in 0..3 {
                    let idx = block * 3 + k;
                    row[idx] = self.derivative(t, k)[axis] - b[idx];
                }
            }
        }
        out
    }

    pub fn max_constraint_residual(&self, bc: &BoundaryConditions) -> f64 {
        self.constraint_residuals(bc)
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Yaw setpoint: face the target before the grasp, hold afterwards.
pub fn yaw_policy(drone_pos: &Vector3<f64>, target_pos: &Vector3<f64>, t: f64, tg: f64, frozen_yaw: f64) -> f64 {
    if t >= tg {
        return frozen_yaw;
    }
    let d = target_pos - drone_pos;
    if d.x.hypot(d.y) < 1e-9 {
        return frozen_yaw;
    }
    d.y.atan2(d.x)
}

/// Maps a setpoint expressed in a moving frame into the fixed frame.
pub fn to_fixed_frame(sp: &Setpoint, fs: &FrameState) -> Setpoint {
    let r = fs.rotation.matrix();
    let x = r * sp.position;
    let v = r * sp.velocity;
    let a = r * sp.acceleration;
    let w = &fs.angular_velocity;
    Setpoint {
        position: fs.position + x,
        velocity: fs.velocity + w.cross(&x) + v,
        acceleration: fs.acceleration
            + fs.angular_acceleration.cross(&x)
            + w.cross(&w.cross(&x))
            + 2.0 * w.cross(&v)
            + a,
        yaw: sp.yaw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn bc_1d() -> BoundaryConditions {
        BoundaryConditions {
            x0: Vector3::zeros(),
            xg: Vector3::new(1.0, 0.0, 0.0),
            vg: Vector3::new(1.0, 0.0, 0.0),
            xf: Vector3::new(2.0, 0.0, 0.0),
            tg: 2.0,
            tf: 4.0,
        }
    }

    #[test]
    fn zero_problem_gives_zero_polynomial() {
        let bc = BoundaryConditions {
            x0: Vector3::zeros(),
            xg: Vector3::zeros(),
            vg: Vector3::zeros(),
            xf: Vector3::zeros(),
            tg: 1.0,
            tf: 2.0,
        };
        let traj = plan_min_snap(&bc).unwrap();
        for c in &traj.coeffs {
            assert!(c.iter().all(|v| *v == 0.0));
        }
        assert_eq!(traj.snap_cost(), 0.0);
    }

    #[test]
    fn degenerate_timing_rejected() {
        let mut bc = bc_1d();
        bc.tg = 0.0;
        assert!(matches!(plan_min_snap(&bc), Err(Error::DegenerateTiming(_))));
        bc.tg = 3.995;
        assert!(matches!(plan_min_snap(&bc), Err(Error::DegenerateTiming(_))));
        bc.tg = 5.0;
        assert!(plan_min_snap(&bc).is_err());
    }

    #[test]
    fn kkt_stationarity_and_feasibility() {
        let kkt = solve_kkt(&bc_1d()).unwrap();
        for axis in 0..3 {
            let sol = &kkt.solutions[axis];
            let c = sol.rows(0, N_COEFFS).into_owned();
            let lambda = sol.rows(N_COEFFS, N_CONSTRAINTS).into_owned();
            let h = DMatrix::from_column_slice(N_COEFFS, N_COEFFS, kkt.hessian.as_slice());
            let a = DMatrix::from_column_slice(N_CONSTRAINTS, N_COEFFS, kkt.constraints.as_slice());
            let stat = &h * &c + a.transpose() * &lambda;
            assert!(stat.amax() < 1e-7, "stationarity {}", stat.amax());
            let feas = &a * &c - DVector::from_column_slice(kkt.rhs[axis].as_slice());
            assert!(feas.amax() < 1e-7);
        }
    }

    #[test]
    fn boundary_values_reproduced() {
        let bc = bc_1d();
        let traj = plan_min_snap(&bc).unwrap();
        assert!(traj.max_constraint_residual(&bc) < 1e-7);
        let sp = traj.eval(0.0);
        assert_eq!(sp.position, bc.x0);
        assert_relative_eq!(traj.velocity(bc.tg), bc.vg, epsilon = 1e-9);
    }

    #[test]
    fn grasp_velocity_half_metre_per_second() {
        let bc = BoundaryConditions {
            x0: Vector3::new(-1.25, 0.0, 0.4),
            xg: Vector3::zeros(),
            vg: Vector3::new(0.5, 0.0, 0.0),
            xf: Vector3::new(1.0, 0.0, 0.6),
            tg: 4.0,
            tf: 7.0,
        };
        let traj = plan_min_snap(&bc).unwrap();
        assert_relative_eq!(traj.velocity(bc.tg), Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn clamps_outside_interval() {
        let bc = bc_1d();
        let traj = plan_min_snap(&bc).unwrap();
        assert_eq!(traj.eval(10.0), traj.eval(bc.tf));
        assert_eq!(traj.eval(-1.0), traj.eval(0.0));
        assert!(traj.velocity(10.0).norm() < 1e-9);
    }

    #[test]
    fn finite_difference_velocity() {
        let bc = bc_1d();
        let traj = plan_min_snap(&bc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..100 {
            let t = rng.gen_range(h..bc.tf - h);
            let fd = (traj.position(t + h) - traj.position(t - h)) / (2.0 * h);
            assert!((fd - traj.velocity(t)).amax() < 1e-5);
            let fd_snap = (traj.jerk(t + h) - traj.jerk(t - h)) / (2.0 * h);
            assert!((fd_snap - traj.snap(t)).amax() < 1e-4);
        }
    }

    #[test]
    fn long_horizon_is_well_conditioned() {
        let bc = BoundaryConditions {
            x0: Vector3::new(-3.0, 1.0, 1.0),
            xg: Vector3::zeros(),
            vg: Vector3::new(0.5, 0.0, 0.0),
            xf: Vector3::new(2.0, 0.0, 1.0),
            tg: 20.0,
            tf: 30.0,
        };
        let traj = plan_min_snap(&bc).unwrap();
        assert!(traj.max_constraint_residual(&bc) < 1e-7);
    }

    #[test]
    fn yaw_policy_cases() {
        let d = Vector3::zeros();
        assert_eq!(yaw_policy(&d, &Vector3::new(1.0, 0.0, 0.0), 0.0, 1.0, 0.3), 0.0);
        assert_relative_eq!(yaw_policy(&d, &Vector3::new(0.0, 1.0, 0.0), 0.0, 1.0, 0.3), FRAC_PI_2);
        assert_eq!(yaw_policy(&d, &Vector3::new(0.0, 1.0, 0.0), 1.0, 1.0, 0.3), 0.3);
        assert_eq!(yaw_policy(&d, &Vector3::new(0.0, 0.0, 2.0), 0.0, 1.0, 0.3), 0.3);
    }

    #[test]
    fn static_frame_is_identity() {
        let sp = Setpoint {
            position: Vector3::new(1.0, 2.0, 3.0),
            velocity: Vector3::new(0.1, -0.2, 0.3),
            acceleration: Vector3::new(-1.0, 0.5, 0.0),
            yaw: 0.4,
        };
        assert_eq!(to_fixed_frame(&sp, &FrameState::default()), sp);
    }

    #[test]
    fn centripetal_acceleration() {
        let r = 0.7;
        let sp = Setpoint {
            position: Vector3::new(r, 0.0, 0.0),
            ..Default::default()
        };
        let fs = FrameState {
            angular_velocity: Vector3::new(0.0, 0.0, 1.0),
            ..Default::default()
        };
        let out = to_fixed_frame(&sp, &fs);
        assert_relative_eq!(out.acceleration, Vector3::new(-r, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(out.velocity, Vector3::new(0.0, r, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn translating_frame_adds_kinematics() {
        let sp = Setpoint {
            position: Vector3::new(1.0, 0.0, 0.0),
            velocity: Vector3::new(0.5, 0.0, 0.0),
            acceleration: Vector3::new(0.0, 0.1, 0.0),
            yaw: 0.0,
        };
        let fs = FrameState {
            position: Vector3::new(0.0, 2.0, 0.0),
            velocity: Vector3::new(0.0, 0.3, 0.0),
            acceleration: Vector3::new(0.0, 0.0, -0.2),
            ..Default::default()
        };
        let out = to_fixed_frame(&sp, &fs);
        assert_eq!(out.position, sp.position + fs.position);
        assert_eq!(out.velocity, sp.velocity + fs.velocity);
        assert_eq!(out.acceleration, sp.acceleration + fs.acceleration);
    }
}
