//! Closed-loop rigid body quadrotor simulation.
//!
//! Integrates
//!
//! ```text
//! m p̈ = m g + f_eff b_z + θ_f(t)
//! Ṙ   = R Ω̂
//! J Ω̇ = -Ω × JΩ + τ
//! ```
//!
//! with RK4 on `(p, ṗ, Ω)` while the attitude is advanced by the
//! exponential of the RK4-weighted stage body rates. Physics, control and
//! setpoint updates run at independent fixed rates.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{compute_wrench, ControlGains, ControllerState, VehicleParams, VehicleState, Wrench};
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Pose, Rotation, Twist};
use crate::smoother::{FixedLagSmoother, SmootherConfig};
use crate::trajectory::{
    plan_min_snap, to_fixed_frame, yaw_policy, BoundaryConditions, FrameState, PolynomialTrajectory, Setpoint,
};

/// External forces and grasp effects applied by the plant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceModel {
    pub constant_force: Vector3<f64>,
    /// Mass added when the gripper closes, kg.
    pub grasp_mass: f64,
    /// Thrust multiplier after the grasp, in `(0, 1]`.
    pub thrust_efficiency_post_grasp: f64,
    /// Thrust multiplier is `1 + gain·max(0, 1 - z/h)` with the ground at z = 0.
    pub ground_effect_gain: f64,
    pub ground_effect_height: f64,
    /// Standard deviation of white force noise per physics step, N.
    pub wind_noise_std: f64,
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        DisturbanceModel {
            constant_force: Vector3::zeros(),
            grasp_mass: 0.0,
            thrust_efficiency_post_grasp: 1.0,
            ground_effect_gain: 0.0,
            ground_effect_height: 0.5,
            wind_noise_std: 0.0,
        }
    }
}

impl DisturbanceModel {
    pub fn validate(&self) -> Result<()> {
        if !self.constant_force.iter().all(|v| v.is_finite()) {
            return Err(Error::config("disturbance.constant_force", "non-finite"));
        }
        if !(self.grasp_mass >= 0.0) {
            return Err(Error::config("disturbance.grasp_mass", "must be non-negative"));
        }
        if !(self.thrust_efficiency_post_grasp > 0.0 && self.thrust_efficiency_post_grasp <= 1.0) {
            return Err(Error::config(
                "disturbance.thrust_efficiency_post_grasp",
                "must lie in (0, 1]",
            ));
        }
        if !(self.ground_effect_gain >= 0.0) {
            return Err(Error::config("disturbance.ground_effect_gain", "must be non-negative"));
        }
        if !(self.ground_effect_height > 0.0) {
            return Err(Error::config("disturbance.ground_effect_height", "must be positive"));
        }
        if !(self.wind_noise_std >= 0.0) {
            return Err(Error::config("disturbance.wind_noise_std", "must be non-negative"));
        }
        Ok(())
    }

    pub fn thrust_multiplier(&self, height: f64, grasped: bool) -> f64 {
        let ground = 1.0 + self.ground_effect_gain * (1.0 - height / self.ground_effect_height).max(0.0);
        let eff = if grasped {
            self.thrust_efficiency_post_grasp
        } else {
            1.0
        };
        ground * eff
    }
}

#[derive(Clone, Copy, Debug)]
struct Derivative {
    dp: Vector3<f64>,
    dv: Vector3<f64>,
    dw: Vector3<f64>,
}

/// Advances the vehicle by `dt` under a constant wrench.
///
/// `extra_force` is added to the disturbance (e.g. sampled wind) and
/// `grasped` switches in the grasp mass and efficiency loss.
#[allow(clippy::too_many_arguments)]
pub fn step(
    state: &VehicleState,
    wrench: &Wrench,
    params: &VehicleParams,
    dist: &DisturbanceModel,
    grasped: bool,
    extra_force: &Vector3<f64>,
    t: f64,
    dt: f64,
) -> Result<VehicleState> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(Error::config("dt", format!("{dt} outside (0, 0.01]")));
    }
    let mass = params.mass + if grasped { dist.grasp_mass } else { 0.0 };
    let j = params.inertia_matrix();
    let j_inv = j.try_inverse().ok_or_else(|| Error::config("inertia", "singular"))?;
    let force = dist.constant_force + extra_force;

    let deriv = |p: &Vector3<f64>, v: &Vector3<f64>, w: &Vector3<f64>, r: &Matrix3<f64>| {
        let thrust = wrench.thrust * dist.thrust_multiplier(p.z, grasped);
        let dv = params.gravity + (thrust * r.column(2) + force) / mass;
        let dw = j_inv * (-w.cross(&(j * w)) + wrench.torque);
        Derivative { dp: *v, dv, dw }
    };

    let r0 = *state.rotation.matrix();
    let (p0, v0, w0) = (state.position, state.velocity, state.body_rate);

    let k1 = deriv(&p0, &v0, &w0, &r0);
    let w1 = w0;
    let (p2, v2, w2) = (
        p0 + k1.dp * (dt / 2.0),
        v0 + k1.dv * (dt / 2.0),
        w0 + k1.dw * (dt / 2.0),
    );
    let r2 = r0 * exp_so3(&(w1 * (dt / 2.0))).matrix();
    let k2 = deriv(&p2, &v2, &w2, &r2);
    let (p3, v3, w3) = (
        p0 + k2.dp * (dt / 2.0),
        v0 + k2.dv * (dt / 2.0),
        w0 + k2.dw * (dt / 2.0),
    );
    let r3 = r0 * exp_so3(&(w2 * (dt / 2.0))).matrix();
    let k3 = deriv(&p3, &v3, &w3, &r3);
    let (p4, v4, w4) = (p0 + k3.dp * dt, v0 + k3.dv * dt, w0 + k3.dw * dt);
    let r4 = r0 * exp_so3(&(w3 * dt)).matrix();
    let k4 = deriv(&p4, &v4, &w4, &r4);

    let sixth = dt / 6.0;
    let position = p0 + (k1.dp + 2.0 * k2.dp + 2.0 * k3.dp + k4.dp) * sixth;
    let velocity = v0 + (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv) * sixth;
    let body_rate = w0 + (k1.dw + 2.0 * k2.dw + 2.0 * k3.dw + k4.dw) * sixth;
    let mean_rate = (w1 + 2.0 * w2 + 2.0 * w3 + w4) / 6.0;
    let rotation = (state.rotation * exp_so3(&(mean_rate * dt))).renormalize();

    let next = VehicleState {
        position,
        velocity,
        rotation,
        body_rate,
    };
    if !next.is_finite() || next.position.norm() > 1e6 {
        return Err(Error::Diverged { t: t + dt });
    }
    Ok(next)
}

/// Fixed update rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rates {
    pub physics_hz: u32,
    pub control_hz: u32,
    pub setpoint_hz: u32,
}

impl Default for Rates {
    fn default() -> Self {
        Rates {
            physics_hz: 1000,
            control_hz: 500,
            setpoint_hz: 100,
        }
    }
}

impl Rates {
    /// Physics steps per control and per setpoint update.
    fn divisors(&self) -> Result<(u32, u32)> {
        let ok = |hz: u32| hz > 0 && self.physics_hz.is_multiple_of(hz) && hz <= self.physics_hz;
        if self.physics_hz < 100 {
            return Err(Error::config("rates.physics_hz", "must be at least 100"));
        }
        if !ok(self.control_hz) {
            return Err(Error::config("rates.control_hz", "must divide physics_hz"));
        }
        if !ok(self.setpoint_hz) {
            return Err(Error::config("rates.setpoint_hz", "must divide physics_hz"));
        }
        Ok((self.physics_hz / self.control_hz, self.physics_hz / self.setpoint_hz))
    }
}

/// Motion of the grasp target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetMotion {
    Static {
        position: Vector3<f64>,
        #[serde(default)]
        heading: f64,
    },
    Linear {
        position: Vector3<f64>,
        velocity: Vector3<f64>,
        #[serde(default)]
        heading: f64,
    },
    /// Rides a turntable about a vertical axis through `center`. The target
    /// frame rotates with the table; its x axis is the approach direction.
    Turntable {
        center: Vector3<f64>,
        radius: f64,
        angular_rate: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        heading: f64,
    },
}

impl TargetMotion {
    pub fn frame_state(&self, t: f64) -> FrameState {
        match self {
            TargetMotion::Static { position, heading } => {
                FrameState::stationary(*position, Rotation::about_z(*heading))
            }
            TargetMotion::Linear {
                position,
                velocity,
                heading,
            } => FrameState {
                position: position + velocity * t,
                velocity: *velocity,
                rotation: Rotation::about_z(*heading),
                ..Default::default()
            },
            TargetMotion::Turntable {
                center,
                radius,
                angular_rate,
                phase,
                heading,
            } => {
                let angle = phase + angular_rate * t;
                let radial = Vector3::new(angle.cos(), angle.sin(), 0.0) * *radius;
                let w = Vector3::new(0.0, 0.0, *angular_rate);
                FrameState {
                    position: center + radial,
                    velocity: w.cross(&radial),
                    acceleration: w.cross(&w.cross(&radial)),
                    rotation: Rotation::about_z(angle + heading),
                    angular_velocity: w,
                    angular_acceleration: Vector3::zeros(),
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let TargetMotion::Turntable { radius, .. } = self {
            if !(*radius > 0.0) {
                return Err(Error::config("target.radius", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Approach geometry in the target frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproachTemplate {
    pub start_offset: Vector3<f64>,
    pub grasp_offset: Vector3<f64>,
    pub final_offset: Vector3<f64>,
    pub tg: f64,
    pub tf: f64,
}

/// Target perception and odometry error models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensingModel {
    /// Constant world-frame error of the target position estimate, m.
    pub target_position_bias: Vector3<f64>,
    /// Feed noisy target measurements through the fixed-lag smoother.
    pub use_smoother: bool,
    pub smoother: SmootherConfig,
    pub measurement_rate_hz: f64,
    pub position_noise_std: f64,
    pub rotation_noise_std: f64,
    /// The target is observed while the drone is horizontally farther than
    /// this from it; one observation is always taken at t = 0.
    pub min_observation_range: f64,
    /// Odometry drift, metres per metre travelled.
    pub vio_drift_rate: f64,
    pub vio_drift_direction: Vector3<f64>,
}

impl Default for SensingModel {
    fn default() -> Self {
        SensingModel {
            target_position_bias: Vector3::zeros(),
            use_smoother: false,
            smoother: SmootherConfig::default(),
            measurement_rate_hz: 14.0,
            position_noise_std: 0.0,
            rotation_noise_std: 0.0,
            min_observation_range: 0.6,
            vio_drift_rate: 0.0,
            vio_drift_direction: Vector3::new(1.0, 0.0, 0.0),
        }
    }
}

/// Constant acceleration pulse added to the setpoint right after the grasp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedforwardImpulse {
    pub acceleration: Vector3<f64>,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub target: TargetMotion,
    /// Grasp speed relative to the target, along the target x axis, m/s.
    pub grasp_speed: f64,
    pub approach: ApproachTemplate,
    #[serde(default)]
    pub disturbance: DisturbanceModel,
    #[serde(default)]
    pub sensing: SensingModel,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub gains: ControlGains,
    #[serde(default)]
    pub rates: Rates,
    /// Simulated time; defaults to `tf + 2`.
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub feedforward_impulse: Option<FeedforwardImpulse>,
    pub seed: u64,
}

fn default_name() -> String {
    "scenario".into()
}

impl Scenario {
    /// Static target grasp at `speed`, approaching along +x from behind and
    /// above. The start distance grows with speed so that the approach stays
    /// monotone.
    pub fn static_grasp(speed: f64, seed: u64) -> Scenario {
        let tg = 2.5;
        let tf = tg + 2.0;
        let run_up = (0.55 * speed * tg).max(1.25);
        Scenario {
            name: format!("static_{speed:.2}"),
            target: TargetMotion::Static {
                position: Vector3::new(0.0, 0.0, 0.5),
                heading: 0.0,
            },
            grasp_speed: speed,
            approach: ApproachTemplate {
                start_offset: Vector3::new(-run_up, 0.0, 0.55),
                grasp_offset: Vector3::new(0.0, 0.0, 0.25),
                final_offset: Vector3::new(0.5 * speed * (tf - tg), 0.0, 0.75),
                tg,
                tf,
            },
            disturbance: DisturbanceModel {
                grasp_mass: 0.060,
                ..Default::default()
            },
            sensing: SensingModel::default(),
            vehicle: VehicleParams::default(),
            gains: ControlGains::default(),
            rates: Rates::default(),
            duration: None,
            feedforward_impulse: None,
            seed,
        }
    }

    /// Target on a turntable moving tangentially at `tangential_speed`.
    pub fn turntable(radius: f64, tangential_speed: f64, relative_speed: f64, seed: u64) -> Scenario {
        let mut sc = Scenario::static_grasp(relative_speed, seed);
        sc.name = format!("turntable_{relative_speed:.2}");
        sc.target = TargetMotion::Turntable {
            center: Vector3::new(0.0, 0.0, 0.5),
            radius,
            angular_rate: tangential_speed / radius,
            phase: 0.0,
            heading: 0.0,
        };
        sc
    }

    pub fn duration(&self) -> f64 {
        self.duration.unwrap_or(self.approach.tf + 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.approach.tg > 0.0) {
            return Err(Error::config("approach.tg", "must be positive"));
        }
        if !(self.approach.tf > self.approach.tg) {
            return Err(Error::config("approach.tf", "must exceed tg"));
        }
        if !self.grasp_speed.is_finite() {
            return Err(Error::config("grasp_speed", "non-finite"));
        }
        let d = self.duration();
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::config("duration", "must be positive"));
        }
        self.target.validate()?;
        self.disturbance.validate()?;
        self.vehicle.validate()?;
        self.gains.validate()?;
        self.rates.divisors()?;
        let s = &self.sensing;
        if !(s.measurement_rate_hz > 0.0) {
            return Err(Error::config("sensing.measurement_rate_hz", "must be positive"));
        }
        if !(s.position_noise_std >= 0.0 && s.rotation_noise_std >= 0.0 && s.vio_drift_rate >= 0.0) {
            return Err(Error::config(
                "sensing",
                "noise levels and drift rate must be non-negative",
            ));
        }
        if s.vio_drift_rate > 0.0 && s.vio_drift_direction.norm() < 1e-12 {
            return Err(Error::config("sensing.vio_drift_direction", "must be non-zero"));
        }
        if s.use_smoother {
            s.smoother.validate()?;
        }
        Ok(())
    }

    /// Boundary conditions in the target frame for a drone starting at the
    /// configured offset.
    pub fn boundary_conditions(&self) -> BoundaryConditions {
        let a = &self.approach;
        BoundaryConditions {
            x0: a.start_offset,
            xg: a.grasp_offset,
            vg: Vector3::new(self.grasp_speed, 0.0, 0.0),
            xf: a.final_offset,
            tg: a.tg,
            tf: a.tf,
        }
    }
}

/// Per-axis decomposition in the grasp frame.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisTriple {
    pub longitudinal: f64,
    pub lateral: f64,
    pub vertical: f64,
}

impl AxisTriple {
    pub fn project(v: &Vector3<f64>, axes: &GraspAxes) -> AxisTriple {
        AxisTriple {
            longitudinal: v.dot(&axes.longitudinal),
            lateral: v.dot(&axes.lateral),
            vertical: v.dot(&axes.vertical),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.longitudinal, self.lateral, self.vertical]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspAxes {
    pub longitudinal: Vector3<f64>,
    pub lateral: Vector3<f64>,
    pub vertical: Vector3<f64>,
}

impl GraspAxes {
    /// Horizontal approach direction from the target frame rotation.
    pub fn from_rotation(r: &Rotation) -> GraspAxes {
        let x = *r * Vector3::x();
        let long = Vector3::new(x.x, x.y, 0.0).normalize();
        let vertical = Vector3::z();
        GraspAxes {
            longitudinal: long,
            lateral: vertical.cross(&long),
            vertical,
        }
    }
}

/// State of the simulation at the moment the gripper closes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspEvent {
    pub t: f64,
    pub axes: GraspAxes,
    /// Position the drone believes it is at.
    pub estimated_position: Vector3<f64>,
    pub true_position: Vector3<f64>,
    pub estimated_grasp_point: Vector3<f64>,
    pub true_grasp_point: Vector3<f64>,
    /// `(p̂ - ĝ)·longitudinal`, the distance past the grasp plane.
    pub plane_offset: f64,
    pub speed: f64,
    /// Setpoint tracking error `p̂ - p_d` and `v̂ - v_d`.
    pub tracking_error: AxisTriple,
    pub velocity_error: AxisTriple,
    /// Error of the target estimate, excluding drift shared with odometry.
    pub pose_estimate_error: AxisTriple,
    /// Odometry drift accumulated since the last target observation.
    pub vio_drift: AxisTriple,
    /// Actual drone position minus actual grasp point.
    pub true_error: AxisTriple,
    pub distance_travelled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSample {
    pub t: f64,
    pub setpoint: Setpoint,
    pub state: VehicleState,
    pub estimated_position: Vector3<f64>,
    pub e_p: Vector3<f64>,
    pub e_v: Vector3<f64>,
    pub theta_hat: Vector3<f64>,
    pub thrust: f64,
    pub drift: Vector3<f64>,
    pub target_true: Vector3<f64>,
    pub target_estimate: Vector3<f64>,
    pub grasped: bool,
    pub event: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioTrace {
    pub name: String,
    pub dt: f64,
    pub samples: Vec<TraceSample>,
    pub grasp: Option<GraspEvent>,
    pub trajectory: PolynomialTrajectory,
    pub physics_dt: f64,
}

impl ScenarioTrace {
    pub fn grasp_samples(&self) -> impl Iterator<Item = &TraceSample> {
        self.samples.iter().filter(|s| s.event.as_deref() == Some("grasp"))
    }
}

/// Target pose estimator used by the scenario loop.
struct TargetEstimator {
    smoother: Option<FixedLagSmoother>,
    rng: ChaCha8Rng,
    position_noise: f64,
    rotation_noise: f64,
    bias: Vector3<f64>,
    /// Drift at the most recent observation.
    drift_at_observation: Vector3<f64>,
    last_observation: Option<f64>,
    next_measurement: f64,
    period: f64,
}

impl TargetEstimator {
    fn new(s: &SensingModel, seed: u64) -> Result<Self> {
        Ok(TargetEstimator {
            smoother: if s.use_smoother {
                Some(FixedLagSmoother::new(s.smoother.clone())?)
            } else {
                None
            },
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a46),
            position_noise: s.position_noise_std,
            rotation_noise: s.rotation_noise_std,
            bias: s.target_position_bias,
            drift_at_observation: Vector3::zeros(),
            last_observation: None,
            next_measurement: 0.0,
            period: 1.0 / s.measurement_rate_hz,
        })
    }

    fn gaussian(&mut self, std: f64) -> Vector3<f64> {
        if std == 0.0 {
            return Vector3::zeros();
        }
        let n = Normal::new(0.0, std).expect("std is finite and positive");
        Vector3::new(
            n.sample(&mut self.rng),
            n.sample(&mut self.rng),
            n.sample(&mut self.rng),
        )
    }

    /// Takes an observation if one is due and allowed.
    fn observe(&mut self, t: f64, truth: &FrameState, drift: &Vector3<f64>, visible: bool) -> Result<()> {
        if t + 1e-12 < self.next_measurement {
            return Ok(());
        }
        self.next_measurement += self.period;
        if !(visible || self.last_observation.is_none()) {
            return Ok(());
        }
        self.last_observation = Some(t);
        self.drift_at_observation = *drift;
        if self.smoother.is_some() {
            let noise_p = self.gaussian(self.position_noise);
            let noise_r = self.gaussian(self.rotation_noise);
            let sm = self.smoother.as_mut().expect("checked above");
            let measured = Pose::new(
                truth.rotation * exp_so3(&noise_r),
                truth.position + self.bias + drift + noise_p,
            );
            sm.push(measured, t)?;
            sm.solve()?;
        }
        Ok(())
    }

    /// Estimated target frame at `t` in the odometry frame.
    fn estimate(&self, t: f64, truth: &FrameState) -> Result<FrameState> {
        match &self.smoother {
            Some(sm) => {
                let (pose, twist) = sm.latest()?;
                let age = t - sm.latest_stamp().unwrap_or(t);
                Ok(extrapolate(&pose, &twist, age))
            }
            None => {
                let mut fs = *truth;
                fs.position += self.bias + self.drift_at_observation;
                Ok(fs)
            }
        }
    }
}

/// Constant-velocity extrapolation of a smoothed target state.
fn extrapolate(pose: &Pose, twist: &Twist, age: f64) -> FrameState {
    let rotation = pose.rotation * exp_so3(&(twist.angular * age));
    FrameState {
        position: pose.translation + twist.linear * age,
        velocity: twist.linear,
        acceleration: Vector3::zeros(),
        angular_velocity: rotation * twist.angular,
        rotation,
        angular_acceleration: Vector3::zeros(),
    }
}

/// Runs a grasp scenario end to end.
pub fn run_scenario(sc: &Scenario) -> Result<ScenarioTrace> {
    sc.validate()?;
    let bc = sc.boundary_conditions();
    let traj = plan_min_snap(&bc)?;
    let (control_div, setpoint_div) = sc.rates.divisors()?;
    let dt = 1.0 / sc.rates.physics_hz as f64;
    let control_dt = dt * control_div as f64;
    let n_steps = (sc.duration() / dt).round() as u64;

    let mut wind_rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let wind = if sc.disturbance.wind_noise_std > 0.0 {
        Some(
            Normal::new(0.0, sc.disturbance.wind_noise_std)
                .map_err(|e| Error::config("disturbance.wind_noise_std", e.to_string()))?,
        )
    } else {
        None
    };
    let mut estimator = TargetEstimator::new(&sc.sensing, sc.seed)?;
    let drift_dir = if sc.sensing.vio_drift_rate > 0.0 {
        sc.sensing.vio_drift_direction.normalize()
    } else {
        Vector3::zeros()
    };

    let truth0 = sc.target.frame_state(0.0);
    let start = truth0.position + truth0.rotation * bc.x0;
    let mut x = VehicleState::at_rest(start);
    x.rotation = Rotation::about_z(truth0.rotation.yaw());
    let mut ctrl = ControllerState::default();
    let mut wrench = Wrench {
        thrust: sc.vehicle.mass * sc.vehicle.gravity.norm(),
        torque: Vector3::zeros(),
    };
    let mut drift = Vector3::zeros();
    let mut travelled = 0.0;
    let mut grasped = false;
    let mut grasp: Option<GraspEvent> = None;
    let mut pending_event: Option<String> = None;
    let mut frozen_yaw = x.rotation.yaw();
    let mut setpoint = Setpoint::default();
    let mut estimate = truth0;
    let mut samples = Vec::with_capacity((n_steps / setpoint_div as u64 + 1) as usize);

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        let truth = sc.target.frame_state(t);
        let est_pos = x.position + drift;

        if k % setpoint_div as u64 == 0 {
            let horizontal = (truth.position - x.position).xy().norm();
            estimator.observe(t, &truth, &drift, horizontal > sc.sensing.min_observation_range)?;
            estimate = estimator.estimate(t, &truth)?;
            let mut sp = to_fixed_frame(&traj.eval(t), &estimate);
            let yaw = yaw_policy(&sp.position, &estimate.position, t, traj.tg, frozen_yaw);
            if t < traj.tg {
                frozen_yaw = yaw;
            }
            sp.yaw = yaw;
            if let (Some(g), Some(ff)) = (&grasp, &sc.feedforward_impulse) {
                if t >= g.t && t < g.t + ff.duration {
                    sp.acceleration += ff.acceleration;
                }
            }
            setpoint = sp;
        }

        if k % control_div as u64 == 0 {
            let mut sensed = x;
            sensed.position = est_pos;
            let out = compute_wrench(
                &sensed,
                &setpoint,
                &Vector3::zeros(),
                &Vector3::zeros(),
                &ctrl,
                &sc.vehicle,
                &sc.gains,
                control_dt,
            )?;
            wrench = out.wrench;
            ctrl = out.state;
        }

        if k % setpoint_div as u64 == 0 {
            samples.push(TraceSample {
                t,
                setpoint,
                state: x,
                estimated_position: est_pos,
                e_p: est_pos - setpoint.position,
                e_v: x.velocity - setpoint.velocity,
                theta_hat: ctrl.theta_hat,
                thrust: wrench.thrust,
                drift,
                target_true: truth.position,
                target_estimate: estimate.position,
                grasped,
                event: pending_event.take(),
            });
        }
        if k == n_steps {
            break;
        }

        let extra = match &wind {
            Some(n) => Vector3::new(
                n.sample(&mut wind_rng),
                n.sample(&mut wind_rng),
                n.sample(&mut wind_rng),
            ),
            None => Vector3::zeros(),
        };
        let next = step(&x, &wrench, &sc.vehicle, &sc.disturbance, grasped, &extra, t, dt)?;
        let moved = (next.position - x.position).norm();
        travelled += moved;
        drift += drift_dir * (sc.sensing.vio_drift_rate * moved);
        x = next;

        if grasp.is_none() {
            let t_next = t + dt;
            let truth_next = sc.target.frame_state(t_next);
            let est_next = estimator.estimate(t_next, &truth_next)?;
            let axes = GraspAxes::from_rotation(&est_next.rotation);
            let g_hat = est_next.position + est_next.rotation * bc.xg;
            let p_hat = x.position + drift;
            let offset = (p_hat - g_hat).dot(&axes.longitudinal);
            if offset >= 0.0 && t_next > 0.0 {
                let g_true = truth_next.position + truth_next.rotation * bc.xg;
                let sp_now = {
                    let mut s = to_fixed_frame(&traj.eval(t_next), &est_next);
                    s.yaw = frozen_yaw;
                    s
                };
                let d_since = drift - estimator.drift_at_observation;
                grasp = Some(GraspEvent {
                    t: t_next,
                    axes,
                    estimated_position: p_hat,
                    true_position: x.position,
                    estimated_grasp_point: g_hat,
                    true_grasp_point: g_true,
                    plane_offset: offset,
                    speed: x.velocity.norm(),
                    tracking_error: AxisTriple::project(&(p_hat - sp_now.position), &axes),
                    velocity_error: AxisTriple::project(&(x.velocity - sp_now.velocity), &axes),
                    pose_estimate_error: AxisTriple::project(&(g_hat - g_true - estimator.drift_at_observation), &axes),
                    vio_drift: AxisTriple::project(&d_since, &axes),
                    true_error: AxisTriple::project(&(x.position - g_true), &axes),
                    distance_travelled: travelled,
                });
                grasped = true;
                pending_event = Some("grasp".into());
            }
        }
    }

    Ok(ScenarioTrace {
        name: sc.name.clone(),
        dt: dt * setpoint_div as f64,
        samples,
        grasp,
        trajectory: traj,
        physics_dt: dt,
    })
}

/// Station keeping at a fixed point under a constant disturbance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoverConfig {
    pub position: Vector3<f64>,
    /// Extra mass carried from t = 0 that the controller does not know about.
    #[serde(default)]
    pub added_mass: f64,
    #[serde(default)]
    pub disturbance: DisturbanceModel,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub gains: ControlGains,
    #[serde(default)]
    pub rates: Rates,
    pub duration: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HoverSample {
    pub t: f64,
    pub position: Vector3<f64>,
    pub e_p: Vector3<f64>,
    pub theta_hat: Vector3<f64>,
}

pub fn run_hover(cfg: &HoverConfig) -> Result<Vec<HoverSample>> {
    cfg.vehicle.validate()?;
    cfg.gains.validate()?;
    cfg.disturbance.validate()?;
    let (control_div, sample_div) = cfg.rates.divisors()?;
    let dt = 1.0 / cfg.rates.physics_hz as f64;
    let n_steps = (cfg.duration / dt).round() as u64;
    let mut plant = cfg.vehicle.clone();
    plant.mass += cfg.added_mass;
    let mut wind_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wind = if cfg.disturbance.wind_noise_std > 0.0 {
        Normal::new(0.0, cfg.disturbance.wind_noise_std).ok()
    } else {
        None
    };

    let sp = Setpoint {
        position: cfg.position,
        ..Default::default()
    };
    let mut x = VehicleState::at_rest(cfg.position);
    let mut ctrl = ControllerState::default();
    let mut wrench = Wrench::default();
    let mut out = Vec::new();
    for k in 0..=n_steps {
        let t = k as f64 * dt;
        if k % control_div as u64 == 0 {
            let o = compute_wrench(
                &x,
                &sp,
                &Vector3::zeros(),
                &Vector3::zeros(),
                &ctrl,
                &cfg.vehicle,
                &cfg.gains,
                dt * control_div as f64,
            )?;
            wrench = o.wrench;
            ctrl = o.state;
        }
        if k % sample_div as u64 == 0 {
            out.push(HoverSample {
                t,
                position: x.position,
                e_p: x.position - sp.position,
                theta_hat: ctrl.theta_hat,
            });
        }
        if k == n_steps {
            break;
        }
        let extra = match &wind {
            Some(n) => Vector3::new(
                n.sample(&mut wind_rng),
                n.sample(&mut wind_rng),
                n.sample(&mut wind_rng),
            ),
            None => Vector3::zeros(),
        };
        x = step(&x, &wrench, &plant, &cfg.disturbance, false, &extra, t, dt)?;
    }
    Ok(out)
}
