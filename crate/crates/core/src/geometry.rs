//! SO(3) and SE(3) primitives.
//!
//! Rotations are stored as 3x3 matrices. Tangent vectors are ordered
//! `(translation, rotation)` everywhere, matching [`Twist`].
//!
//! The retraction used throughout the crate is component-wise: translation is
//! additive and rotation is right-multiplied by the exponential,
//!
//! ```text
//! T ⊞ (v, w)·dt = (t + v·dt, R·exp(w·dt))
//! T2 ⊟ T1       = (t2 - t1, log(R1ᵀ R2))
//! ```

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Below this angle the series expansions are used.
const SMALL_ANGLE: f64 = 1e-6;

/// Tolerance used when validating user supplied rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

/// Skew-symmetric matrix such that `hat(v) * w == v.cross(&w)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Only the skew part of `m` is read.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn exp_so3(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Rotation vector of `r`, with angle in `[0, π]`.
///
/// At exactly π the axis sign is ambiguous; the axis is then taken from the
/// column of `(R + I)/2` with the largest diagonal entry, oriented so that
/// its largest-magnitude component is positive.
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    let m = &r.0;
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = vee(m); // sin(θ)·axis
    let sin = s.norm();
    let theta = sin.atan2(cos);

    if theta < SMALL_ANGLE {
        // θ/sinθ ≈ 1 + θ²/6
        return s * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta > 1e-4 {
        return s * (theta / sin);
    }

    // Near π: recover the axis from the symmetric part, n·nᵀ = (sym(R) - cI)/(1 - c).
    let b = ((m + m.transpose()) * 0.5 - Matrix3::identity() * cos) / (1.0 - cos);
    let mut k = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(k, k)] {
            k = i;
        }
    }
    let mut axis: Vector3<f64> = b.column(k).into_owned() / b[(k, k)].max(f64::MIN_POSITIVE).sqrt();
    axis.normalize_mut();
    if sin > 1e-12 {
        if axis.dot(&s) < 0.0 {
            axis = -axis;
        }
    } else {
        let big = axis.iamax();
        if axis[big] < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// Right Jacobian of SO(3): `exp(w + dw) ≈ exp(w)·exp(Jr(w)·dw)`.
pub fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Inverse of [`right_jacobian`]: `log(exp(w)·exp(d)) ≈ w + Jr⁻¹(w)·d`.
pub fn right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// An element of SO(3).
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and handedness within [`ROTATION_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::config("rotation", "non-finite entry"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::config(
                "rotation",
                format!("not a rotation (|RᵀR - I| = {ortho:.3e}, det = {det:.12})"),
            ));
        }
        Ok(Rotation(m))
    }

    /// Wraps `m` without validation. The caller guarantees `m ∈ SO(3)`.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Nearest rotation to an arbitrary matrix (polar decomposition via SVD).
    pub fn nearest(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    pub fn about_x(angle: f64) -> Self {
        exp_so3(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn about_y(angle: f64) -> Self {
        exp_so3(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn about_z(angle: f64) -> Self {
        exp_so3(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        log_so3(self).norm()
    }

    /// Geodesic distance to `other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).angle()
    }

    /// One Newton step towards the orthonormal manifold, `R(3I - RᵀR)/2`.
    pub fn renormalize(&self) -> Self {
        let m = &self.0;
        Rotation(m * (Matrix3::identity() * 3.0 - m.transpose() * m) * 0.5)
    }

    /// Frobenius norm of `RᵀR - I`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    /// Heading of the body x axis projected onto the world xy plane.
    pub fn yaw(&self) -> f64 {
        self.0[(1, 0)].atan2(self.0[(0, 0)])
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.0;
        write!(
            f,
            "Rotation[[{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}]]",
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)]
        )
    }
}

// Serialized as row-major nested arrays; validated on the way in.
impl Serialize for Rotation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m = &self.0;
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        let m = Matrix3::from_fn(|i, j| rows[i][j]);
        Rotation::from_matrix(m).map_err(serde::de::Error::custom)
    }
}

/// Rigid body pose, an element of SE(3).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

/// Linear velocity (world frame) and angular velocity (body frame).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Twist { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist::new(v.fixed_rows::<3>(0).into_owned(), v.fixed_rows::<3>(3).into_owned())
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| v.is_finite())
    }
}

/// `T ⊞ (δ·dt)`.
pub fn boxplus(pose: &Pose, delta: &Twist, dt: f64) -> Pose {
    Pose::new(
        pose.rotation * exp_so3(&(delta.angular * dt)),
        pose.translation + delta.linear * dt,
    )
}

/// `T2 ⊟ T1`, the tangent vector taking `T1` to `T2`.
pub fn boxminus(t2: &Pose, t1: &Pose) -> Vector6<f64> {
    let dt = t2.translation - t1.translation;
    let dr = log_so3(&(t1.rotation.transpose() * t2.rotation));
    Vector6::new(dt.x, dt.y, dt.z, dr.x, dr.y, dr.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn hat_examples() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let h = hat(&Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(h, Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn hat_matches_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 3.0;
            let w = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 3.0;
            let cross = Vector3::new(v.y * w.z - v.z * w.y, v.z * w.x - v.x * w.z, v.x * w.y - v.y * w.x);
            assert_relative_eq!(hat(&v) * w, cross, epsilon = 1e-14);
            let h = hat(&v);
            assert_eq!(h, -h.transpose());
            assert_eq!(vee(&h), v);
        }
    }

    #[test]
    fn exp_examples() {
        assert_eq!(*exp_so3(&Vector3::zeros()).matrix(), Matrix3::identity());
        let r = exp_so3(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*r.matrix(), expected, epsilon = 1e-15);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let axis = random_unit(&mut rng);
            let angle = rng.gen_range(0.0..PI - 1e-6);
            let r = exp_so3(&(axis * angle));
            assert!(r.orthogonality_error() < 1e-12);
            assert_relative_eq!(r.angle(), angle, epsilon = 1e-9);
            let back = exp_so3(&log_so3(&r));
            worst = worst.max((back.matrix() - r.matrix()).norm());
        }
        assert!(worst < 1e-8, "worst round-trip error {worst:e}");
    }

    #[test]
    fn log_at_pi_uses_largest_diagonal() {
        for axis in [
            Vector3::x(),
            Vector3::y(),
            Vector3::z(),
            Vector3::new(1.0, 1.0, 0.0).normalize(),
        ] {
            let r = exp_so3(&(axis * PI));
            let w = log_so3(&r);
            assert_relative_eq!(w.norm(), PI, epsilon = 1e-9);
            assert_relative_eq!(w.normalize(), axis, epsilon = 1e-7);
            // deterministic
            assert_eq!(w, log_so3(&r));
        }
        // near π, still consistent with exp
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let r = exp_so3(&(axis * (PI - 1e-7)));
        let back = exp_so3(&log_so3(&r));
        assert!((back.matrix() - r.matrix()).norm() < 1e-8);
    }

    #[test]
    fn right_jacobian_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w = random_unit(&mut rng) * rng.gen_range(0.0..3.0);
            let prod = right_jacobian(&w) * right_jacobian_inv(&w);
            assert_relative_eq!(prod, Matrix3::identity(), epsilon = 1e-9);
            // exp(w + dw) ≈ exp(w) exp(Jr dw)
            let dw = random_unit(&mut rng) * 1e-6;
            let lhs = exp_so3(&(w + dw));
            let rhs = exp_so3(&w) * exp_so3(&(right_jacobian(&w) * dw));
            assert!((lhs.matrix() - rhs.matrix()).norm() < 1e-11);
        }
    }

    #[test]
    fn boxplus_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Pose::new(exp_so3(&(random_unit(&mut rng) * 1.2)), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(boxplus(&t, &Twist::zero(), 0.5), t);

        let moved = boxplus(&Pose::identity(), &Twist::new(Vector3::x(), Vector3::zeros()), 1.0);
        assert_eq!(moved.translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(moved.rotation, Rotation::identity());
    }

    #[test]
    fn boxminus_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = Pose::new(exp_so3(&(random_unit(&mut rng) * 0.7)), Vector3::new(-1.0, 0.5, 2.0));
        assert_eq!(boxminus(&t, &t), Vector6::zeros());
        let shifted = Pose::new(t.rotation, t.translation + Vector3::new(0.1, 0.0, 0.0));
        assert_relative_eq!(
            boxminus(&shifted, &t),
            Vector6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn boxplus_boxminus_inverse_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let t = Pose::new(
                exp_so3(&(random_unit(&mut rng) * rng.gen_range(0.0..3.0))),
                Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()),
            );
            let delta = Twist::new(
                random_unit(&mut rng) * rng.gen_range(0.0..2.0),
                random_unit(&mut rng) * rng.gen_range(0.0..2.0),
            );
            let dt = 0.01;
            let back = boxminus(&boxplus(&t, &delta, dt), &t) / dt;
            assert_relative_eq!(back, delta.to_vector(), epsilon = 1e-8);
        }
    }

    #[test]
    fn rotation_serde_validates() {
        let r = Rotation::about_z(0.3);
        let json = serde_json::to_string(&r).unwrap();
        let back: Rotation = serde_json::from_str(&json).unwrap();
        assert!((back.matrix() - r.matrix()).norm() < 1e-15);
        assert!(serde_json::from_str::<Rotation>("[[2,0,0],[0,1,0],[0,0,1]]").is_err());
    }

    #[test]
    fn nearest_rotation_and_renormalize() {
        let r = Rotation::about_x(0.4) * Rotation::about_y(-1.1);
        let perturbed = r.matrix() + Matrix3::from_element(1e-6);
        let n = Rotation::nearest(&perturbed);
        assert!(n.orthogonality_error() < 1e-12);
        let drifted = Rotation::from_matrix_unchecked(r.matrix() * 1.000001);
        assert!(drifted.renormalize().orthogonality_error() < 1e-10);
    }
}
