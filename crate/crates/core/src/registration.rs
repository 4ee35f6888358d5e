//! Outlier-robust registration of corresponded keypoints.
//!
//! Minimizes the truncated least squares cost
//! `Σ min(‖b_i - R a_i - t‖², c̄²)` over rigid motions. The search starts
//! from minimal 3-point subsets (exhaustive for small sets, seeded random
//! samples otherwise) and alternates inlier reclassification with a
//! closed-form realignment until the inlier set stops changing. Each
//! alternation step cannot increase the truncated cost.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation};

/// Inlier threshold used by default, in metres.
pub const DEFAULT_C_BAR: f64 = 0.010;
/// Every subset of at least three pairs seeds a start up to this many
/// points, which makes the result the global optimum.
pub const ALL_SUBSETS_LIMIT: usize = 10;
/// Exhaustive 3-subset enumeration is used up to this many points.
pub const EXHAUSTIVE_LIMIT: usize = 12;
/// Random 3-subsets drawn above [`EXHAUSTIVE_LIMIT`].
pub const RANDOM_STARTS: usize = 200;
const MAX_ALTERNATIONS: usize = 100;

/// Paired model (`b_i`, CAD frame) and observed (`a_i`, camera frame) points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondenceSet {
    pub model_points: Vec<Vector3<f64>>,
    pub observed_points: Vec<Vector3<f64>>,
}

impl CorrespondenceSet {
    pub fn new(model_points: Vec<Vector3<f64>>, observed_points: Vec<Vector3<f64>>) -> Result<Self> {
        let set = CorrespondenceSet {
            model_points,
            observed_points,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_points.len() != self.observed_points.len() {
            return Err(Error::config(
                "observed_points",
                format!(
                    "{} observed points for {} model points",
                    self.observed_points.len(),
                    self.model_points.len()
                ),
            ));
        }
        if self.len() < 3 {
            return Err(Error::config("model_points", "at least 3 correspondences required"));
        }
        let finite = self
            .model_points
            .iter()
            .chain(&self.observed_points)
            .all(|p| p.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::config("model_points", "non-finite coordinate"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.model_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_points.is_empty()
    }

    /// `‖b_i - R a_i - t‖` for every pair.
    pub fn residuals(&self, rotation: &Rotation, translation: &Vector3<f64>) -> Vec<f64> {
        self.model_points
            .iter()
            .zip(&self.observed_points)
            .map(|(b, a)| (b - rotation.matrix() * a - translation).norm())
            .collect()
    }

    pub fn truncated_cost(&self, rotation: &Rotation, translation: &Vector3<f64>, c_bar: f64) -> f64 {
        truncated_cost(&self.residuals(rotation, translation), c_bar)
    }
}

pub fn truncated_cost(residuals: &[f64], c_bar: f64) -> f64 {
    let c2 = c_bar * c_bar;
    residuals.iter().map(|r| (r * r).min(c2)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegistrationResult {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    pub inlier_mask: Vec<bool>,
    pub residuals: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
}

impl RegistrationResult {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|m| **m).count()
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

/// Closed-form least squares rigid alignment of the masked-in pairs,
/// minimizing `Σ ‖b_i - R a_i - t‖²`.
pub fn horn_align(pairs: &CorrespondenceSet, mask: &[bool]) -> Result<(Rotation, Vector3<f64>)> {
    let selected: Vec<usize> = (0..pairs.len())
        .filter(|&i| mask.get(i).copied().unwrap_or(false))
        .collect();
    align_indices(pairs, &selected)
}

fn align_indices(pairs: &CorrespondenceSet, idx: &[usize]) -> Result<(Rotation, Vector3<f64>)> {
    if idx.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} pairs selected, need at least 3",
            idx.len()
        )));
    }
    let n = idx.len() as f64;
    let a_mean = idx.iter().map(|&i| pairs.observed_points[i]).sum::<Vector3<f64>>() / n;
    let b_mean = idx.iter().map(|&i| pairs.model_points[i]).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread: f64 = 0.0;
    for &i in idx {
        let a = pairs.observed_points[i] - a_mean;
        let b = pairs.model_points[i] - b_mean;
        cov += a * b.transpose();
        spread = spread.max(a.norm()).max(b.norm());
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateConfiguration("SVD failed".into())),
    };
    let mut s = svd.singular_values;
    // nalgebra orders singular values descending, but make sure.
    s.as_mut_slice().sort_by(|x, y| y.total_cmp(x));
    if s[0] <= f64::EPSILON * spread * spread || s[1] <= 1e-10 * s[0] {
        return Err(Error::DegenerateConfiguration(
            "selected points are collinear or coincident".into(),
        ));
    }
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let rotation = Rotation::from_matrix_unchecked(r).renormalize();
    let translation = b_mean - rotation.matrix() * a_mean;
    Ok((rotation, translation))
}

#[derive(Clone, Debug)]
struct Hypothesis {
    rotation: Rotation,
    translation: Vector3<f64>,
    mask: Vec<bool>,
    cost: f64,
    inliers: usize,
}

impl Hypothesis {
    fn evaluate(pairs: &CorrespondenceSet, rotation: Rotation, translation: Vector3<f64>, c_bar: f64) -> Self {
        let residuals = pairs.residuals(&rotation, &translation);
        let mask: Vec<bool> = residuals.iter().map(|r| *r <= c_bar).collect();
        let inliers = mask.iter().filter(|m| **m).count();
        Hypothesis {
            rotation,
            translation,
            cost: truncated_cost(&residuals, c_bar),
            mask,
            inliers,
        }
    }

    /// Lower cost wins; ties go to more inliers, then the lexicographically
    /// smallest mask (`false < true`).
    fn better_than(&self, other: &Hypothesis, scale: f64) -> bool {
        let tol = 1e-12 * scale;
        if self.cost < other.cost - tol {
            return true;
        }
        if self.cost > other.cost + tol {
            return false;
        }
        if self.inliers != other.inliers {
            return self.inliers > other.inliers;
        }
        self.mask < other.mask
    }
}

/// Alternates reclassify/realign from a starting pose. Returns the final
/// hypothesis and the cost after each iteration.
fn refine(pairs: &CorrespondenceSet, start: Hypothesis, c_bar: f64, trace: Option<&mut Vec<f64>>) -> Hypothesis {
    let mut current = start;
    let mut log = Vec::new();
    log.push(current.cost);
    for _ in 0..MAX_ALTERNATIONS {
        if current.inliers < 3 {
            break;
        }
        let Ok((r, t)) = horn_align(pairs, &current.mask) else {
            break;
        };
        let next = Hypothesis::evaluate(pairs, r, t, c_bar);
        log.push(next.cost);
        let fixed_point = next.mask == current.mask;
        if next.cost > current.cost {
            break;
        }
        current = next;
        if fixed_point {
            break;
        }
    }
    if let Some(trace) = trace {
        trace.extend(log);
    }
    current
}

fn starting_subsets(n: usize, seed: u64) -> Vec<Vec<usize>> {
    if n <= ALL_SUBSETS_LIMIT {
        (0u32..1 << n)
            .filter(|bits| bits.count_ones() >= 3)
            .map(|bits| (0..n).filter(|i| bits & (1 << i) != 0).collect())
            .collect()
    } else if n <= EXHAUSTIVE_LIMIT {
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    out.push(vec![i, j, k]);
                }
            }
        }
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..RANDOM_STARTS)
            .map(|_| {
                let mut s = sample(&mut rng, n, 3).into_vec();
                s.sort_unstable();
                s
            })
            .collect()
    }
}

/// Solves the truncated least squares registration problem.
pub fn solve_tls(pairs: &CorrespondenceSet, c_bar: f64, seed: u64) -> Result<RegistrationResult> {
    solve_tls_traced(pairs, c_bar, seed, None)
}

/// [`solve_tls`], additionally recording the truncated cost after every
/// alternation step of every start (one inner `Vec` per start).
pub fn solve_tls_traced(
    pairs: &CorrespondenceSet,
    c_bar: f64,
    seed: u64,
    mut traces: Option<&mut Vec<Vec<f64>>>,
) -> Result<RegistrationResult> {
    pairs.validate()?;
    if !(c_bar > 0.0 && c_bar.is_finite()) {
        return Err(Error::config("c_bar", "must be positive"));
    }
    let n = pairs.len();
    let scale = (n as f64) * c_bar * c_bar;

    let mut best: Option<Hypothesis> = None;
    let consider = |h: Hypothesis, best: &mut Option<Hypothesis>| {
        if best.as_ref().is_none_or(|b| h.better_than(b, scale)) {
            *best = Some(h);
        }
    };

    // All-inlier solution, refined as well.
    if let Ok((r, t)) = horn_align(pairs, &vec![true; n]) {
        let h = Hypothesis::evaluate(pairs, r, t, c_bar);
        consider(h.clone(), &mut best);
        let mut log = Vec::new();
        let refined = refine(pairs, h, c_bar, Some(&mut log));
        if let Some(tr) = traces.as_deref_mut() {
            tr.push(log);
        }
        consider(refined, &mut best);
    }

    for subset in starting_subsets(n, seed) {
        let Ok((r, t)) = align_indices(pairs, &subset) else {
            continue;
        };
        let h = Hypothesis::evaluate(pairs, r, t, c_bar);
        consider(h.clone(), &mut best);
        let mut log = Vec::new();
        let refined = refine(pairs, h, c_bar, Some(&mut log));
        if let Some(tr) = traces.as_deref_mut() {
            tr.push(log);
        }
        consider(refined, &mut best);
    }

    let best = best.ok_or(Error::NoConsensus { inliers: 0 })?;
    if best.inliers < 3 {
        return Err(Error::NoConsensus { inliers: best.inliers });
    }
    // The winner may be a raw start; report the realigned fixed point only
    // if it is at least as good.
    let residuals = pairs.residuals(&best.rotation, &best.translation);
    let converged = horn_align(pairs, &best.mask)
        .map(|(r, t)| {
            let again = Hypothesis::evaluate(pairs, r, t, c_bar);
            again.mask == best.mask
        })
        .unwrap_or(false);
    Ok(RegistrationResult {
        rotation: best.rotation,
        translation: best.translation,
        inlier_mask: best.mask,
        cost: best.cost,
        residuals,
        converged,
    })
}

/// Mounting of the camera on the vehicle body.
pub fn default_camera_extrinsic() -> Pose {
    // Pitched down by 35 degrees about the body y axis.
    Pose::new(Rotation::about_y(35f64.to_radians()), Vector3::zeros())
}

/// `drone ∘ extrinsic ∘ camera_relative`.
pub fn compose_global(camera_relative: &Pose, drone_pose: &Pose, extrinsic: &Pose) -> Pose {
    *drone_pose * *extrinsic * *camera_relative
}
