//! Fixed-lag smoother for target pose and velocity.
//!
//! The window is solved in batch with damped Gauss-Newton. Each state holds
//! a pose `T_k` and a twist `ξ_k = (v_k, ω_k)` and the cost is
//!
//! ```text
//! Σ ‖T_k ⊟ T̂_k‖²_Ω1 + ‖(T_k ⊞ ξ_k·dt) ⊟ T_{k+1}‖²_Ω2 + ‖ξ_k - ξ_{k+1}‖²_Ω3 + ‖ξ_k‖²_Ω4
//! ```
//!
//! Only neighbouring states interact, so the normal equations are block
//! tridiagonal with 12x12 blocks and are solved with a block Cholesky sweep.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Matrix6, SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boxminus, exp_so3, log_so3, right_jacobian, right_jacobian_inv, Pose, Twist};

/// Tangent dimension of one window state: pose (6) + twist (6).
pub const STATE_DIM: usize = 12;

type Block = SMatrix<f64, STATE_DIM, STATE_DIM>;
/// Per-state tangent vector `(δt, δθ, δv, δω)`.
pub type StateVec = SVector<f64, STATE_DIM>;
type FactorJac = SMatrix<f64, 6, STATE_DIM>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherConfig {
    pub window: usize,
    pub dt: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    /// Drone odometry covariance, row-major, ordered (translation, rotation).
    pub sigma_d: [[f64; 6]; 6],
    /// Treat `sigma_d` as expressed in the measured target frame and rotate
    /// it into the world frame per measurement.
    pub rotate_sigma_d: bool,
    pub max_iterations: usize,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            window: 20,
            dt: 1.0 / 14.0,
            t1: 1e-4,
            t2: 1e-2,
            t3: 1e-2,
            t4: 10.0,
            r1: 1e-4,
            r2: 1e-2,
            r3: 1e-2,
            r4: 1.0,
            sigma_d: [[0.0; 6]; 6],
            rotate_sigma_d: false,
            max_iterations: 50,
        }
    }
}

fn block_diag(t: f64, r: f64) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
}

impl SmootherConfig {
    pub fn sigma_d_matrix(&self) -> Matrix6<f64> {
        Matrix6::from_fn(|i, j| self.sigma_d[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::config("window", "must be at least 2"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        for (key, v) in [
            ("t1", self.t1),
            ("t2", self.t2),
            ("t3", self.t3),
            ("t4", self.t4),
            ("r1", self.r1),
            ("r2", self.r2),
            ("r3", self.r3),
            ("r4", self.r4),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations", "must be positive"));
        }
        let s = self.sigma_d_matrix();
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::config("sigma_d", "non-finite entry"));
        }
        if (s - s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
            return Err(Error::config("sigma_d", "must be symmetric"));
        }
        let min_eig = s.symmetric_eigenvalues().min();
        if min_eig < -1e-12 * s.amax().max(1.0) {
            return Err(Error::config("sigma_d", "must be positive semidefinite"));
        }
        Ok(())
    }
}

/// Information matrices `[Ω1, Ω2, Ω3, Ω4]`.
pub fn weights(cfg: &SmootherConfig) -> Result<[Matrix6<f64>; 4]> {
    cfg.validate()?;
    let cov1 = cfg.sigma_d_matrix() + block_diag(cfg.t1, cfg.r1);
    let omega1 = invert_covariance(&cov1, "sigma_d")?;
    Ok([
        omega1,
        block_diag(1.0 / cfg.t2, 1.0 / cfg.r2),
        block_diag(1.0 / cfg.t3, 1.0 / cfg.r3),
        block_diag(1.0 / cfg.t4, 1.0 / cfg.r4),
    ])
}

fn invert_covariance(cov: &Matrix6<f64>, key: &str) -> Result<Matrix6<f64>> {
    let inv = cov
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::config(key, "measurement covariance is not invertible"))?;
    // Symmetrize away round-off.
    Ok((inv + inv.transpose()) * 0.5)
}

/// Smoothed window estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetTrack {
    pub poses: Vec<Pose>,
    pub twists: Vec<Twist>,
    pub stamps: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TargetTrack {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// One linearized cost term touching at most two consecutive states.
#[derive(Clone, Debug)]
pub struct Factor {
    pub residual: Vector6<f64>,
    pub info: Matrix6<f64>,
    /// `(state index, ∂r/∂δstate)` pairs.
    pub jacobians: Vec<(usize, FactorJac)>,
}

impl Factor {
    pub fn cost(&self) -> f64 {
        self.residual.dot(&(self.info * self.residual))
    }
}

/// The window optimization problem, independent of buffering.
#[derive(Clone, Debug)]
pub struct WindowProblem {
    pub measurements: Vec<Pose>,
    pub dt: f64,
    /// Per-measurement `Ω1`.
    pub omega1: Vec<Matrix6<f64>>,
    pub omega2: Matrix6<f64>,
    pub omega3: Matrix6<f64>,
    pub omega4: Matrix6<f64>,
}

/// Window decision variables.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowState {
    pub poses: Vec<Pose>,
    pub twists: Vec<Twist>,
}

impl WindowState {
    /// Applies a stacked tangent update `(δt, δθ, δv, δω)` per state.
    pub fn retract(&self, delta: &[StateVec]) -> WindowState {
        let poses = self
            .poses
            .iter()
            .zip(delta)
            .map(|(p, d)| {
                Pose::new(
                    p.rotation * exp_so3(&d.fixed_rows::<3>(3).into_owned()),
                    p.translation + d.fixed_rows::<3>(0),
                )
            })
            .collect();
        let twists = self
            .twists
            .iter()
            .zip(delta)
            .map(|(x, d)| Twist::new(x.linear + d.fixed_rows::<3>(6), x.angular + d.fixed_rows::<3>(9)))
            .collect();
        WindowState { poses, twists }
    }
}

impl WindowProblem {
    pub fn new(cfg: &SmootherConfig, measurements: Vec<Pose>) -> Result<Self> {
        let [omega1, omega2, omega3, omega4] = weights(cfg)?;
        let omega1 = if cfg.rotate_sigma_d {
            let base = block_diag(cfg.t1, cfg.r1);
            let sigma = cfg.sigma_d_matrix();
            measurements
                .iter()
                .map(|m| {
                    let mut rot = Matrix6::zeros();
                    rot.fixed_view_mut::<3, 3>(0, 0).copy_from(m.rotation.matrix());
                    rot.fixed_view_mut::<3, 3>(3, 3).copy_from(m.rotation.matrix());
                    invert_covariance(&(rot * sigma * rot.transpose() + base), "sigma_d")
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![omega1; measurements.len()]
        };
        Ok(WindowProblem {
            measurements,
            dt: cfg.dt,
            omega1,
            omega2,
            omega3,
            omega4,
        })
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// Poses from measurements, twists from first differences.
    pub fn initial_state(&self) -> WindowState {
        let poses = self.measurements.clone();
        let mut twists = vec![Twist::zero(); poses.len()];
        for k in 1..poses.len() {
            let d = boxminus(&poses[k], &poses[k - 1]) / self.dt;
            twists[k] = Twist::from_vector(&d);
        }
        WindowState { poses, twists }
    }

    /// Residuals and Jacobians of every cost term at `x`.
    pub fn linearize(&self, x: &WindowState) -> Vec<Factor> {
        let n = self.len();
        let mut factors = Vec::with_capacity(4 * n);
        let dt = self.dt;
        for k in 0..n {
            // Measurement.
            let p = &x.poses[k];
            let m = &self.measurements[k];
            let r = boxminus(p, m);
            let e = r.fixed_rows::<3>(3).into_owned();
            let mut j = FactorJac::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            j.fixed_view_mut::<3, 3>(3, 3).copy_from(&right_jacobian_inv(&e));
            factors.push(Factor {
                residual: r,
                info: self.omega1[k],
                jacobians: vec![(k, j)],
            });

            // Velocity prior.
            let mut j = FactorJac::zeros();
            j.fixed_view_mut::<6, 6>(0, 6).copy_from(&Matrix6::identity());
            factors.push(Factor {
                residual: x.twists[k].to_vector(),
                info: self.omega4,
                jacobians: vec![(k, j)],
            });

            if k + 1 == n {
                continue;
            }
            let q = &x.poses[k + 1];
            let xi = &x.twists[k];

            // Constant velocity motion.
            let phi = xi.angular * dt;
            let step = exp_so3(&phi);
            let m = q.rotation.transpose() * p.rotation * step;
            let e = log_so3(&m);
            let jr_inv = right_jacobian_inv(&e);
            let rt = p.translation + xi.linear * dt - q.translation;
            let residual = Vector6::new(rt.x, rt.y, rt.z, e.x, e.y, e.z);
            let mut ja = FactorJac::zeros();
            ja.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            ja.fixed_view_mut::<3, 3>(0, 6).copy_from(&(Matrix3::identity() * dt));
            ja.fixed_view_mut::<3, 3>(3, 3)
                .copy_from(&(jr_inv * step.matrix().transpose()));
            ja.fixed_view_mut::<3, 3>(3, 9)
                .copy_from(&(jr_inv * right_jacobian(&phi) * dt));
            let mut jb = FactorJac::zeros();
            jb.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
            jb.fixed_view_mut::<3, 3>(3, 3)
                .copy_from(&(-jr_inv * m.matrix().transpose()));
            factors.push(Factor {
                residual,
                info: self.omega2,
                jacobians: vec![(k, ja), (k + 1, jb)],
            });

            // Velocity smoothness.
            let mut ja = FactorJac::zeros();
            ja.fixed_view_mut::<6, 6>(0, 6).copy_from(&Matrix6::identity());
            let jb = -ja;
            factors.push(Factor {
                residual: xi.to_vector() - x.twists[k + 1].to_vector(),
                info: self.omega3,
                jacobians: vec![(k, ja), (k + 1, jb)],
            });
        }
        factors
    }

    pub fn cost(&self, x: &WindowState) -> f64 {
        self.linearize(x).iter().map(Factor::cost).sum()
    }

    /// Damped Gauss-Newton from `init`.
    pub fn solve_from(&self, init: WindowState, max_iterations: usize) -> Result<(WindowState, Solve)> {
        let n = self.len();
        if n == 0 {
            return Err(Error::NotInitialized);
        }
        let mut x = init;
        let mut factors = self.linearize(&x);
        let mut cost: f64 = factors.iter().map(Factor::cost).sum();
        let mut lambda = 1e-6;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < max_iterations {
            iterations += 1;
            let (diag, off, grad) = assemble(n, &factors);
            let grad_max = grad.iter().fold(0.0_f64, |m, g| m.max(g.amax()));
            if grad_max < 1e-14 {
                converged = true;
                break;
            }

            let mut accepted = false;
            while lambda < 1e16 {
                let damped: Vec<Block> = diag
                    .iter()
                    .map(|d| d + Block::from_diagonal(&d.diagonal()) * lambda + Block::identity() * (lambda * 1e-12))
                    .collect();
                let Some(step) = solve_block_tridiagonal(&damped, &off, &grad) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial = x.retract(&step);
                let trial_factors = self.linearize(&trial);
                let trial_cost: f64 = trial_factors.iter().map(Factor::cost).sum();
                if trial_cost.is_finite() && trial_cost <= cost {
                    let decrease = cost - trial_cost;
                    x = trial;
                    factors = trial_factors;
                    let previous = cost;
                    cost = trial_cost;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    if decrease <= 1e-10 * previous.max(f64::MIN_POSITIVE) {
                        converged = true;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                // No descent possible at any damping: stationary to round-off.
                converged = grad_max < 1e-6 * (1.0 + cost);
                break;
            }
            if converged {
                break;
            }
        }
        Ok((
            x,
            Solve {
                cost,
                iterations,
                converged,
            },
        ))
    }
}

/// Convergence report of a window solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Solve {
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Builds the block tridiagonal normal equations. Returns diagonal blocks,
/// upper off-diagonal blocks `H[k][k+1]`, and the right-hand side `-g`.
fn assemble(n: usize, factors: &[Factor]) -> (Vec<Block>, Vec<Block>, Vec<StateVec>) {
    let mut diag = vec![Block::zeros(); n];
    let mut off = vec![Block::zeros(); n.saturating_sub(1)];
    let mut rhs = vec![StateVec::zeros(); n];
    for f in factors {
        let wr = f.info * f.residual;
        for (i, ji) in &f.jacobians {
            let jt_w = ji.transpose() * f.info;
            rhs[*i] -= ji.transpose() * wr;
            for (j, jj) in &f.jacobians {
                let block = jt_w * jj;
                if i == j {
                    diag[*i] += block;
                } else if *j == i + 1 {
                    off[*i] += block;
                }
            }
        }
    }
    (diag, off, rhs)
}

/// Block Cholesky forward/backward sweep for a symmetric block tridiagonal
/// system. `None` if a pivot block is not positive definite.
fn solve_block_tridiagonal(diag: &[Block], off: &[Block], rhs: &[StateVec]) -> Option<Vec<StateVec>> {
    let n = diag.len();
    let mut schur: Vec<nalgebra::Cholesky<f64, nalgebra::Const<STATE_DIM>>> = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for k in 0..n {
        let (s, yk) = if k == 0 {
            (diag[0], rhs[0])
        } else {
            let prev = &schur[k - 1];
            let b = &off[k - 1];
            (
                diag[k] - b.transpose() * prev.solve(b),
                rhs[k] - b.transpose() * prev.solve(&y[k - 1]),
            )
        };
        schur.push(s.cholesky()?);
        y.push(yk);
    }
    let mut x = vec![StateVec::zeros(); n];
    for k in (0..n).rev() {
        let mut r = y[k];
        if k + 1 < n {
            r -= off[k] * x[k + 1];
        }
        x[k] = schur[k].solve(&r);
    }
    Some(x)
}

/// Sliding-window smoother holding the most recent measurements.
#[derive(Clone, Debug)]
pub struct FixedLagSmoother {
    cfg: SmootherConfig,
    buffer: VecDeque<(f64, Pose)>,
    last: Option<TargetTrack>,
}

impl FixedLagSmoother {
    pub fn new(cfg: SmootherConfig) -> Result<Self> {
        weights(&cfg)?;
        Ok(FixedLagSmoother {
            cfg,
            buffer: VecDeque::new(),
            last: None,
        })
    }

    pub fn config(&self) -> &SmootherConfig {
        &self.cfg
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Adds a world-frame measurement, evicting the oldest when full.
    pub fn push(&mut self, measurement: Pose, stamp: f64) -> Result<()> {
        if !stamp.is_finite() {
            return Err(Error::config("stamp", "non-finite"));
        }
        if let Some(&(previous, _)) = self.buffer.back() {
            if stamp <= previous {
                return Err(Error::OutOfOrder { stamp, previous });
            }
        }
        self.buffer.push_back((stamp, measurement));
        while self.buffer.len() > self.cfg.window {
            self.buffer.pop_front();
        }
        Ok(())
    }

    pub fn solve(&mut self) -> Result<TargetTrack> {
        if self.buffer.is_empty() {
            return Err(Error::NotInitialized);
        }
        let measurements: Vec<Pose> = self.buffer.iter().map(|(_, p)| *p).collect();
        let stamps: Vec<f64> = self.buffer.iter().map(|(s, _)| *s).collect();
        let problem = WindowProblem::new(&self.cfg, measurements)?;
        let init = problem.initial_state();
        let (x, report) = problem.solve_from(init, self.cfg.max_iterations)?;
        let track = TargetTrack {
            poses: x.poses,
            twists: x.twists,
            stamps,
            cost: report.cost,
            iterations: report.iterations,
            converged: report.converged,
        };
        self.last = Some(track.clone());
        Ok(track)
    }

    /// Final element of the last solved window.
    pub fn latest(&self) -> Result<(Pose, Twist)> {
        let track = self.last.as_ref().ok_or(Error::NotInitialized)?;
        match (track.poses.last(), track.twists.last()) {
            (Some(p), Some(t)) => Ok((*p, *t)),
            _ => Err(Error::NotInitialized),
        }
    }

    pub fn latest_stamp(&self) -> Option<f64> {
        self.last.as_ref().and_then(|t| t.stamps.last().copied())
    }
}

/// World-frame angular velocity of a body-frame rate.
pub fn world_angular_velocity(pose: &Pose, twist: &Twist) -> Vector3<f64> {
    pose.rotation * twist.angular
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{boxplus, Rotation};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ) * scale
    }

    #[test]
    fn weight_examples() {
        let cfg = SmootherConfig {
            t1: 1.0,
            r1: 1.0,
            ..Default::default()
        };
        let [o1, _, _, o4] = weights(&cfg).unwrap();
        assert_relative_eq!(o1, Matrix6::identity(), epsilon = 1e-15);
        assert_relative_eq!(
            o4,
            Matrix6::from_diagonal(&Vector6::new(0.1, 0.1, 0.1, 1.0, 1.0, 1.0)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn weight_inverse_with_random_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = Matrix6::from_fn(|_, _| rng.gen_range(-0.1..0.1));
            let sigma = a * a.transpose();
            let cfg = SmootherConfig {
                sigma_d: std::array::from_fn(|i| std::array::from_fn(|j| sigma[(i, j)])),
                ..Default::default()
            };
            let [o1, ..] = weights(&cfg).unwrap();
            let cov = sigma + block_diag(cfg.t1, cfg.r1);
            assert!((o1 * cov - Matrix6::identity()).amax() < 1e-9);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SmootherConfig {
            window: 1,
            ..Default::default()
        };
        assert!(weights(&cfg).is_err());
        let mut sigma = [[0.0; 6]; 6];
        sigma[0][1] = 1.0;
        let cfg = SmootherConfig {
            sigma_d: sigma,
            ..Default::default()
        };
        assert!(matches!(weights(&cfg), Err(Error::Config { .. })));
        let cfg = SmootherConfig {
            r3: 0.0,
            ..Default::default()
        };
        assert!(matches!(weights(&cfg), Err(Error::Config { key, .. }) if key == "r3"));
    }

    #[test]
    fn push_evicts_and_orders() {
        let mut s = FixedLagSmoother::new(SmootherConfig::default()).unwrap();
        let w = s.config().window;
        for k in 0..w + 3 {
            s.push(Pose::identity(), k as f64 * 0.1).unwrap();
        }
        assert_eq!(s.buffered(), w);
        let last = (w + 2) as f64 * 0.1;
        assert!(matches!(s.push(Pose::identity(), last), Err(Error::OutOfOrder { .. })));
    }

    #[test]
    fn latest_before_solve_errors() {
        let s = FixedLagSmoother::new(SmootherConfig::default()).unwrap();
        assert_eq!(s.latest(), Err(Error::NotInitialized));
        let mut s = s;
        assert!(matches!(s.solve(), Err(Error::NotInitialized)));
    }

    #[test]
    fn single_measurement() {
        let mut s = FixedLagSmoother::new(SmootherConfig::default()).unwrap();
        let m = Pose::new(Rotation::about_z(0.3), Vector3::new(1.0, 2.0, 0.5));
        s.push(m, 0.0).unwrap();
        let track = s.solve().unwrap();
        assert_eq!(track.len(), 1);
        assert!((track.poses[0].translation - m.translation).norm() < 1e-12);
        assert!(track.twists[0].to_vector().norm() < 1e-12);
        let (p, t) = s.latest().unwrap();
        assert_eq!(p, track.poses[0]);
        assert_eq!(t, track.twists[0]);
    }

    #[test]
    fn stationary_measurements() {
        let mut s = FixedLagSmoother::new(SmootherConfig::default()).unwrap();
        let m = Pose::new(Rotation::about_x(-0.4), Vector3::new(0.0, 1.0, 0.2));
        for k in 0..10 {
            s.push(m, k as f64 / 14.0).unwrap();
        }
        let track = s.solve().unwrap();
        assert!(track.converged);
        for (p, t) in track.poses.iter().zip(&track.twists) {
            assert!(boxminus(p, &m).norm() < 1e-12);
            assert!(t.to_vector().norm() < 1e-12);
        }
        let (p, _) = s.latest().unwrap();
        assert_eq!(p, *track.poses.last().unwrap());
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> (WindowProblem, WindowState) {
        let cfg = SmootherConfig::default();
        let measurements: Vec<Pose> = (0..n)
            .map(|_| Pose::new(exp_so3(&random_vec(rng, 1.5)), random_vec(rng, 2.0)))
            .collect();
        let problem = WindowProblem::new(&cfg, measurements).unwrap();
        let state = WindowState {
            poses: (0..n)
                .map(|_| Pose::new(exp_so3(&random_vec(rng, 1.5)), random_vec(rng, 2.0)))
                .collect(),
            twists: (0..n)
                .map(|_| Twist::new(random_vec(rng, 1.0), random_vec(rng, 1.0)))
                .collect(),
        };
        (problem, state)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..10 {
            let (problem, x) = random_state(&mut rng, 4);
            let factors = problem.linearize(&x);
            for (fi, f) in factors.iter().enumerate() {
                for (state, jac) in &f.jacobians {
                    for d in 0..STATE_DIM {
                        let mut plus = vec![StateVec::zeros(); problem.len()];
                        let mut minus = plus.clone();
                        plus[*state][d] = h;
                        minus[*state][d] = -h;
                        let rp = problem.linearize(&x.retract(&plus))[fi].residual;
                        let rm = problem.linearize(&x.retract(&minus))[fi].residual;
                        let fd = (rp - rm) / (2.0 * h);
                        let col = jac.column(d);
                        let err = (fd - col).norm();
                        assert!(err <= 1e-5 * col.norm().max(1.0), "factor {fi} dof {d}: {err:e}");
                    }
                }
            }
        }
    }

    #[test]
    fn constant_velocity_truth_recovered() {
        let v = Vector3::new(0.08, 0.0, 0.0);
        // The default motion weights are loose; the velocity prior would
        // dominate. A tight constant-velocity model isolates the estimator.
        let cfg = SmootherConfig {
            t2: 1e-6,
            r2: 1e-6,
            t3: 1e-4,
            r3: 1e-4,
            ..Default::default()
        };
        let mut s = FixedLagSmoother::new(cfg.clone()).unwrap();
        let start = Pose::new(Rotation::about_z(0.2), Vector3::new(0.5, 0.0, 0.0));
        let truth = Twist::new(v, Vector3::zeros());
        for k in 0..cfg.window {
            let p = boxplus(&start, &truth, k as f64 * cfg.dt);
            s.push(p, k as f64 * cfg.dt).unwrap();
        }
        let track = s.solve().unwrap();
        for t in &track.twists {
            assert!((t.linear - v).norm() < 1e-3, "{:?}", t.linear);
        }
    }

    #[test]
    fn cost_non_increasing_and_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (problem, _) = random_state(&mut rng, 8);
        let init = problem.initial_state();
        let c0 = problem.cost(&init);
        let mut x = init;
        let mut prev = c0;
        for _ in 0..10 {
            let (next, report) = problem.solve_from(x.clone(), 1).unwrap();
            assert!(report.cost <= prev + 1e-15);
            prev = report.cost;
            x = next;
        }
        let (_, report) = problem.solve_from(problem.initial_state(), 50).unwrap();
        assert!(report.converged);
        assert!(report.cost <= c0);
    }

    #[test]
    fn frame_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = SmootherConfig::default();
        let truth = Twist::new(Vector3::new(0.1, -0.05, 0.02), Vector3::new(0.0, 0.0, 0.3));
        let start = Pose::new(Rotation::about_y(0.1), Vector3::new(0.2, 0.1, 0.0));
        let meas: Vec<Pose> = (0..12)
            .map(|k| {
                let p = boxplus(&start, &truth, k as f64 * cfg.dt);
                Pose::new(
                    p.rotation * exp_so3(&random_vec(&mut rng, 0.05)),
                    p.translation + random_vec(&mut rng, 0.03),
                )
            })
            .collect();
        let g = Pose::new(exp_so3(&Vector3::new(0.3, -1.2, 0.7)), Vector3::new(3.0, -1.0, 2.0));
        let moved: Vec<Pose> = meas.iter().map(|m| g * *m).collect();

        let solve = |m: Vec<Pose>| {
            let p = WindowProblem::new(&cfg, m).unwrap();
            p.solve_from(p.initial_state(), 100).unwrap().0
        };
        let a = solve(meas);
        let b = solve(moved);
        for k in 0..a.poses.len() {
            let expected = g * a.poses[k];
            assert!(boxminus(&b.poses[k], &expected).norm() < 1e-8);
            assert_relative_eq!(b.twists[k].linear, g.rotation * a.twists[k].linear, epsilon = 1e-8);
            assert_relative_eq!(b.twists[k].angular, a.twists[k].angular, epsilon = 1e-8);
        }
    }

    #[test]
    fn rotated_sigma_d_matches_plain_when_isotropic() {
        let mut sigma = [[0.0; 6]; 6];
        for (i, row) in sigma.iter_mut().enumerate() {
            row[i] = 0.01;
        }
        let plain = SmootherConfig {
            sigma_d: sigma,
            ..Default::default()
        };
        let rotated = SmootherConfig {
            rotate_sigma_d: true,
            ..plain.clone()
        };
        let m = vec![Pose::new(Rotation::about_z(1.0), Vector3::zeros()); 3];
        let a = WindowProblem::new(&plain, m.clone()).unwrap();
        let b = WindowProblem::new(&rotated, m).unwrap();
        for (x, y) in a.omega1.iter().zip(&b.omega1) {
            assert!((x - y).amax() < 1e-9);
        }
    }
}
