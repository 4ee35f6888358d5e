//! Geometric SE(3) tracking controller with translational disturbance
//! adaptation.
//!
//! Error conventions:
//!
//! ```text
//! e_p = p - p_d                e_v = ṗ - ṗ_d
//! e_R = ½ (R_dᵀR - RᵀR_d)∨     e_Ω = Ω - RᵀR_d Ω_d
//! A   = kp e_p + kv e_v + m g - m p̈_d + θ̄
//! f   = -b_zᵀ A,  with the desired body z axis along -A
//! τ   = -kr e_R - kΩ e_Ω + J RᵀR_d Ω̇_d + (RᵀR_d Ω_d)^ J RᵀR_d Ω_d
//! θ̄  ← Π(θ̄ + dt γf (e_v + kaf e_p))
//! ```

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, vee, Rotation};
use crate::trajectory::Setpoint;

pub const STANDARD_GRAVITY: f64 = 9.81;
const MIN_COMMAND: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub mass: f64,
    /// Row-major inertia tensor, kg·m².
    pub inertia: [[f64; 3]; 3],
    pub gravity: Vector3<f64>,
    pub max_thrust: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass: 1.2,
            inertia: [[0.012, 0.0, 0.0], [0.0, 0.012, 0.0], [0.0, 0.0, 0.022]],
            gravity: Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
            max_thrust: 4.0 * 1.2 * STANDARD_GRAVITY,
        }
    }
}

impl VehicleParams {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.inertia[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::config("mass", "must be positive"));
        }
        if !(self.max_thrust > 0.0) {
            return Err(Error::config("max_thrust", "must be positive"));
        }
        if !self.gravity.iter().all(|v| v.is_finite()) {
            return Err(Error::config("gravity", "non-finite"));
        }
        let j = self.inertia_matrix();
        if (j - j.transpose()).amax() > 1e-12 || j.cholesky().is_none() {
            return Err(Error::config("inertia", "must be symmetric positive definite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlGains {
    pub kp: f64,
    pub kv: f64,
    pub kr: f64,
    pub k_omega: f64,
    pub gamma_f: f64,
    pub k_af: f64,
    /// Radius of the ball the disturbance estimate is projected onto, N.
    pub theta_max: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        ControlGains {
            kp: 12.0,
            kv: 6.0,
            kr: 2.0,
            k_omega: 0.25,
            gamma_f: 10.0,
            k_af: 2.0,
            theta_max: 5.0,
        }
    }
}

impl ControlGains {
    /// All gains must be positive except `gamma_f`, which may be zero to
    /// switch adaptation off.
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("kp", self.kp),
            ("kv", self.kv),
            ("kr", self.kr),
            ("k_omega", self.k_omega),
            ("k_af", self.k_af),
            ("theta_max", self.theta_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.gamma_f >= 0.0 && self.gamma_f.is_finite()) {
            return Err(Error::config("gamma_f", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ControllerState {
    pub theta_hat: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub rotation: Rotation,
    pub body_rate: Vector3<f64>,
}

impl VehicleState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        VehicleState {
            position,
            velocity: Vector3::zeros(),
            rotation: Rotation::identity(),
            body_rate: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.velocity.iter())
            .chain(self.body_rate.iter())
            .chain(self.rotation.matrix().iter())
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub thrust: f64,
    pub torque: Vector3<f64>,
}

/// Everything computed in one control update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlOutput {
    pub wrench: Wrench,
    pub state: ControllerState,
    pub e_p: Vector3<f64>,
    pub e_v: Vector3<f64>,
    pub e_r: Vector3<f64>,
    pub e_omega: Vector3<f64>,
    pub desired_rotation: Rotation,
}

/// Attitude whose body z axis points along `thrust_cmd` with the body x
/// axis as close as possible to heading `yaw`.
pub fn desired_rotation(thrust_cmd: &Vector3<f64>, yaw: f64) -> Result<Rotation> {
    let norm = thrust_cmd.norm();
    if !(norm > MIN_COMMAND) {
        return Err(Error::DegenerateAttitude(format!(
            "thrust command norm {norm:e} is too small"
        )));
    }
    let b3 = thrust_cmd / norm;
    let heading = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let projected = heading - b3 * b3.dot(&heading);
    let pn = projected.norm();
    if pn < MIN_COMMAND {
        return Err(Error::DegenerateAttitude(
            "heading is parallel to the thrust axis".into(),
        ));
    }
    let b1 = projected / pn;
    let b2 = b3.cross(&b1);
    Ok(Rotation::from_matrix_unchecked(Matrix3::from_columns(&[b1, b2, b3])))
}

/// Radial projection onto the ball of radius `radius`.
pub fn project_ball(v: Vector3<f64>, radius: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > radius {
        v * (radius / n)
    } else {
        v
    }
}

/// One controller update. `omega_d` and `omega_d_dot` are the desired body
/// rate and its derivative, expressed in the desired body frame.
#[allow(clippy::too_many_arguments)]
pub fn compute_wrench(
    x: &VehicleState,
    sp: &Setpoint,
    omega_d: &Vector3<f64>,
    omega_d_dot: &Vector3<f64>,
    st: &ControllerState,
    params: &VehicleParams,
    gains: &ControlGains,
    dt: f64,
) -> Result<ControlOutput> {
    if !(dt > 0.0) {
        return Err(Error::config("dt", "must be positive"));
    }
    let m = params.mass;
    let e_p = x.position - sp.position;
    let e_v = x.velocity - sp.velocity;
    let a = gains.kp * e_p + gains.kv * e_v + m * params.gravity - m * sp.acceleration + st.theta_hat;
    let r_d = desired_rotation(&(-a), sp.yaw)?;

    let r = x.rotation.matrix();
    let rd = r_d.matrix();
    let b_z = r.column(2).into_owned();
    let thrust = (-b_z.dot(&a)).clamp(0.0, params.max_thrust);

    let rt_rd = r.transpose() * rd;
    let e_r = vee(&((rd.transpose() * r - rt_rd) * 0.5));
    let w_d = rt_rd * omega_d;
    let e_omega = x.body_rate - w_d;
    let j = params.inertia_matrix();
    let torque = -gains.kr * e_r - gains.k_omega * e_omega + j * (rt_rd * omega_d_dot) + hat(&w_d) * (j * w_d);

    let theta_hat = project_ball(
        st.theta_hat + dt * gains.gamma_f * (e_v + gains.k_af * e_p),
        gains.theta_max,
    );

    Ok(ControlOutput {
        wrench: Wrench { thrust, torque },
        state: ControllerState { theta_hat },
        e_p,
        e_v,
        e_r,
        e_omega,
        desired_rotation: r_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
    }

    #[test]
    fn hover_attitude() {
        let p = VehicleParams::default();
        let hover = Vector3::new(0.0, 0.0, p.mass * STANDARD_GRAVITY);
        let r = desired_rotation(&hover, 0.0).unwrap();
        assert_relative_eq!(*r.matrix(), Matrix3::identity(), epsilon = 1e-15);
        let r = desired_rotation(&hover, FRAC_PI_2).unwrap();
        assert_relative_eq!(*r.matrix(), *Rotation::about_z(FRAC_PI_2).matrix(), epsilon = 1e-15);
    }

    #[test]
    fn desired_rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let cmd = rand_vec(&mut rng, 20.0) + Vector3::new(0.0, 0.0, 5.0);
            let yaw = rng.gen_range(-3.0..3.0);
            let Ok(r) = desired_rotation(&cmd, yaw) else { continue };
            assert!(r.orthogonality_error() < 1e-9);
            assert_relative_eq!(r.matrix().determinant(), 1.0, epsilon = 1e-9);
            assert_relative_eq!(r.matrix().column(2).into_owned(), cmd.normalize(), epsilon = 1e-9);
        }
    }

    #[test]
    fn degenerate_attitude() {
        assert!(matches!(
            desired_rotation(&Vector3::zeros(), 0.0),
            Err(Error::DegenerateAttitude(_))
        ));
        assert!(desired_rotation(&Vector3::new(1.0, 0.0, 0.0), 0.0).is_err());
    }

    #[test]
    fn hover_equilibrium() {
        let p = VehicleParams::default();
        let g = ControlGains::default();
        let x = VehicleState::at_rest(Vector3::new(0.0, 0.0, 1.0));
        let sp = Setpoint {
            position: x.position,
            ..Default::default()
        };
        let out = compute_wrench(
            &x,
            &sp,
            &Vector3::zeros(),
            &Vector3::zeros(),
            &ControllerState::default(),
            &p,
            &g,
            0.002,
        )
        .unwrap();
        assert_relative_eq!(out.wrench.thrust, p.mass * STANDARD_GRAVITY, epsilon = 1e-12);
        assert_eq!(out.wrench.torque, Vector3::zeros());
        assert_eq!(out.state.theta_hat, Vector3::zeros());
    }

    #[test]
    fn feedforward_force_balance() {
        // At zero error the commanded force cancels gravity and supplies m p̈_d.
        let p = VehicleParams::default();
        let g = ControlGains::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let sp = Setpoint {
                position: rand_vec(&mut rng, 2.0),
                velocity: rand_vec(&mut rng, 1.0),
                acceleration: rand_vec(&mut rng, 3.0),
                yaw: rng.gen_range(-3.0..3.0),
            };
            let rd = desired_rotation(&(p.mass * (sp.acceleration - p.gravity)), sp.yaw).unwrap();
            let x = VehicleState {
                position: sp.position,
                velocity: sp.velocity,
                rotation: rd,
                body_rate: Vector3::zeros(),
            };
            let out = compute_wrench(
                &x,
                &sp,
                &Vector3::zeros(),
                &Vector3::zeros(),
                &ControllerState::default(),
                &p,
                &g,
                0.002,
            )
            .unwrap();
            let force = out.wrench.thrust * (rd * Vector3::z()) + p.mass * p.gravity;
            assert_relative_eq!(force, p.mass * sp.acceleration, epsilon = 1e-9);
            assert!(out.e_r.norm() < 1e-12);
        }
    }

    #[test]
    fn attitude_error_is_skew() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r = exp_so3(&rand_vec(&mut rng, 3.0));
            let rd = exp_so3(&rand_vec(&mut rng, 3.0));
            let m = (rd.matrix().transpose() * r.matrix() - r.matrix().transpose() * rd.matrix()) * 0.5;
            assert!((m + m.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn projection_bounds_estimate() {
        let p = VehicleParams::default();
        let g = ControlGains {
            gamma_f: 1e4,
            theta_max: 0.5,
            ..Default::default()
        };
        let mut st = ControllerState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = VehicleState {
                position: rand_vec(&mut rng, 1.0),
                velocity: rand_vec(&mut rng, 1.0),
                rotation: exp_so3(&rand_vec(&mut rng, 0.3)),
                body_rate: rand_vec(&mut rng, 1.0),
            };
            let out = compute_wrench(
                &x,
                &Setpoint::default(),
                &Vector3::zeros(),
                &Vector3::zeros(),
                &st,
                &p,
                &g,
                0.002,
            )
            .unwrap();
            st = out.state;
            assert!(st.theta_hat.norm() <= g.theta_max * (1.0 + 1e-12));
        }
    }

    #[test]
    fn thrust_invariant_under_world_yaw() {
        let p = VehicleParams::default();
        let g = ControlGains::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = VehicleState {
                position: rand_vec(&mut rng, 1.0),
                velocity: rand_vec(&mut rng, 1.0),
                rotation: exp_so3(&rand_vec(&mut rng, 0.4)),
                body_rate: rand_vec(&mut rng, 1.0),
            };
            let sp = Setpoint {
                position: rand_vec(&mut rng, 1.0),
                velocity: rand_vec(&mut rng, 1.0),
                acceleration: rand_vec(&mut rng, 1.0),
                yaw: rng.gen_range(-3.0..3.0),
            };
            let psi = rng.gen_range(-3.0..3.0);
            let rz = Rotation::about_z(psi);
            let x2 = VehicleState {
                position: rz * x.position,
                velocity: rz * x.velocity,
                rotation: rz * x.rotation,
                body_rate: x.body_rate,
            };
            let sp2 = Setpoint {
                position: rz * sp.position,
                velocity: rz * sp.velocity,
                acceleration: rz * sp.acceleration,
                yaw: sp.yaw + psi,
            };
            let st = ControllerState::default();
            let a = compute_wrench(&x, &sp, &Vector3::zeros(), &Vector3::zeros(), &st, &p, &g, 0.002).unwrap();
            let b = compute_wrench(&x2, &sp2, &Vector3::zeros(), &Vector3::zeros(), &st, &p, &g, 0.002).unwrap();
            assert_relative_eq!(a.wrench.thrust, b.wrench.thrust, epsilon = 1e-9);
        }
    }

    #[test]
    fn invalid_gains() {
        let g = ControlGains {
            kp: 0.0,
            ..Default::default()
        };
        assert!(g.validate().is_err());
        let g = ControlGains {
            gamma_f: 0.0,
            ..Default::default()
        };
        assert!(g.validate().is_ok());
        assert!(VehicleParams::default().validate().is_ok());
    }
}
