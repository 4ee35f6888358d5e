//! Geometric grasp tolerances and per-axis error budgets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::AxisTriple;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GripperDims {
    /// Effective longitudinal length, m.
    pub delta1: f64,
    /// Interior lateral length between the finger pairs, m.
    pub delta2: f64,
    /// Vertical span from rear to front fingers, m.
    pub delta3: f64,
}

impl Default for GripperDims {
    fn default() -> Self {
        GripperDims {
            delta1: 0.234,
            delta2: 0.098,
            delta3: 0.152,
        }
    }
}

impl GripperDims {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("gripper.delta1", self.delta1),
            ("gripper.delta2", self.delta2),
            ("gripper.delta3", self.delta3),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetDims {
    pub ell1: f64,
    pub ell2: f64,
    #[serde(default)]
    pub mass: Option<f64>,
}

impl TargetDims {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("target.ell1", self.ell1), ("target.ell2", self.ell2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if let Some(m) = self.mass {
            if !(m > 0.0) {
                return Err(Error::config("target.mass", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBounds {
    pub longitudinal: f64,
    pub lateral: f64,
    pub vertical: f64,
}

impl ErrorBounds {
    /// Axes whose bound is negative: the object cannot fit.
    pub fn infeasible_axes(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.longitudinal < 0.0 {
            out.push("longitudinal");
        }
        if self.lateral < 0.0 {
            out.push("lateral");
        }
        if self.vertical < 0.0 {
            out.push("vertical");
        }
        out
    }
}

/// Maximum tolerable grasp-point errors. Negative values are returned as
/// they are.
pub fn error_bounds(g: &GripperDims, t: &TargetDims) -> ErrorBounds {
    ErrorBounds {
        longitudinal: (g.delta1 - t.ell1) / 2.0,
        lateral: (t.ell2 - g.delta2) / 2.0,
        vertical: g.delta3 / 2.0,
    }
}

/// Error sources on one axis. Signs are kept for reporting; totals use
/// magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisBudget {
    pub pose_estimate_error: f64,
    pub vio_drift: f64,
    pub tracking_error: f64,
}

impl AxisBudget {
    pub fn total(&self) -> f64 {
        self.pose_estimate_error.abs() + self.vio_drift.abs() + self.tracking_error.abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBudget {
    pub longitudinal: AxisBudget,
    pub lateral: AxisBudget,
    pub vertical: AxisBudget,
}

impl ErrorBudget {
    pub fn from_components(pose: &AxisTriple, drift: &AxisTriple, tracking: &AxisTriple) -> ErrorBudget {
        let axis = |i: usize| AxisBudget {
            pose_estimate_error: pose.as_array()[i],
            vio_drift: drift.as_array()[i],
            tracking_error: tracking.as_array()[i],
        };
        ErrorBudget {
            longitudinal: axis(0),
            lateral: axis(1),
            vertical: axis(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for b in [self.longitudinal, self.lateral, self.vertical] {
            if ![b.pose_estimate_error, b.vio_drift, b.tracking_error]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(Error::config("budget", "non-finite component"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisVerdict {
    pub total: f64,
    /// Total used for the verdict.
    pub effective_total: f64,
    pub bound: f64,
    pub within: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub longitudinal: AxisVerdict,
    pub lateral: AxisVerdict,
    pub vertical: AxisVerdict,
}

impl Classification {
    pub fn all_within(&self) -> bool {
        self.longitudinal.within && self.lateral.within && self.vertical.within
    }
}

/// Worst-case per-axis totals against the bounds. Gripper closure is
/// triggered by the drone's own position, so longitudinal tracking error
/// does not move the grasp point and is left out of that axis' verdict.
pub fn classify(budget: &ErrorBudget, bounds: &ErrorBounds) -> Classification {
    let verdict = |b: &AxisBudget, effective: f64, bound: f64| AxisVerdict {
        total: b.total(),
        effective_total: effective,
        bound,
        within: effective <= bound,
    };
    let l = &budget.longitudinal;
    Classification {
        longitudinal: verdict(l, l.pose_estimate_error.abs() + l.vio_drift.abs(), bounds.longitudinal),
        lateral: verdict(&budget.lateral, budget.lateral.total(), bounds.lateral),
        vertical: verdict(&budget.vertical, budget.vertical.total(), bounds.vertical),
    }
}

/// Fixed-width table with the columns pose, VIO, tracking, total, bound.
pub fn format_table(budget: &ErrorBudget, c: &Classification) -> String {
    let mut s = format!(
        "{:<13}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}  {}\n",
        "axis", "pose_cm", "vio_cm", "track_cm", "total_cm", "eff_cm", "bound_cm", "verdict"
    );
    let rows = [
        ("longitudinal", &budget.longitudinal, &c.longitudinal),
        ("lateral", &budget.lateral, &c.lateral),
        ("vertical", &budget.vertical, &c.vertical),
    ];
    for (name, b, v) in rows {
        s += &format!(
            "{:<13}{:>10.2}{:>10.2}{:>10.2}{:>10.2}{:>10.2}{:>10.2}  {}\n",
            name,
            100.0 * b.pose_estimate_error.abs(),
            100.0 * b.vio_drift.abs(),
            100.0 * b.tracking_error.abs(),
            100.0 * v.total,
            100.0 * v.effective_total,
            100.0 * v.bound,
            if v.within { "within" } else { "outside" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn target(ell1: f64, ell2: f64) -> TargetDims {
        TargetDims { ell1, ell2, mass: None }
    }

    #[test]
    fn vertical_bound_from_default_span() {
        let b = error_bounds(&GripperDims::default(), &target(0.1, 0.12));
        assert_eq!(b.vertical, 0.076);
    }

    #[test]
    fn longitudinal_examples() {
        let g = GripperDims::default();
        assert_eq!(error_bounds(&g, &target(g.delta1, 0.1)).longitudinal, 0.0);
        assert_relative_eq!(
            error_bounds(&g, &target(0.10, 0.1)).longitudinal,
            0.067,
            epsilon = 1e-15
        );
    }

    #[test]
    fn narrow_target_flagged() {
        let b = error_bounds(&GripperDims::default(), &target(0.1, 0.05));
        assert!(b.lateral < 0.0);
        assert_eq!(b.infeasible_axes(), vec!["lateral"]);
    }

    #[test]
    fn zero_budget_within() {
        let b = error_bounds(&GripperDims::default(), &target(0.1, 0.12));
        assert!(classify(&ErrorBudget::default(), &b).all_within());
    }

    #[test]
    fn longitudinal_tracking_excluded() {
        let budget = ErrorBudget {
            longitudinal: AxisBudget {
                pose_estimate_error: 0.03,
                vio_drift: 0.02,
                tracking_error: 0.20,
            },
            ..Default::default()
        };
        let b = error_bounds(&GripperDims::default(), &target(0.10, 0.12));
        let c = classify(&budget, &b);
        assert_relative_eq!(c.longitudinal.effective_total, 0.05, epsilon = 1e-15);
        assert_relative_eq!(c.longitudinal.total, 0.25, epsilon = 1e-15);
        assert!(c.longitudinal.within);
    }

    #[test]
    fn lateral_threshold() {
        let bounds = ErrorBounds {
            longitudinal: 0.1,
            lateral: 0.01,
            vertical: 0.076,
        };
        let at = |e: f64| {
            let budget = ErrorBudget {
                lateral: AxisBudget {
                    tracking_error: e,
                    ..Default::default()
                },
                ..Default::default()
            };
            classify(&budget, &bounds).lateral.within
        };
        assert!(at(0.01));
        assert!(!at(0.01 + 1e-12));
        assert!(!at(-0.0100001));
    }

    #[test]
    fn invalid_dims() {
        assert!(GripperDims {
            delta1: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(target(-1.0, 0.1).validate().is_err());
    }

    fn component() -> impl Strategy<Value = f64> {
        -0.2..0.2f64
    }

    proptest! {
        #[test]
        fn bounds_monotone(g1 in 0.05..0.5f64, g2 in 0.05..0.5f64, g3 in 0.05..0.5f64,
                           l1 in 0.01..0.4f64, l2 in 0.01..0.4f64, d in 0.0..0.1f64) {
            let g = GripperDims { delta1: g1, delta2: g2, delta3: g3 };
            let a = error_bounds(&g, &target(l1, l2));
            let b = error_bounds(&g, &target(l1 + d, l2 + d));
            prop_assert!(b.longitudinal <= a.longitudinal);
            prop_assert!(b.lateral >= a.lateral);
            prop_assert_eq!(a.vertical, g3 / 2.0);
            prop_assert_eq!(b.vertical, g3 / 2.0);
        }

        #[test]
        fn classify_monotone(p in component(), v in component(), t in component(),
                             axis in 0usize..3, which in 0usize..3, grow in 0.0..0.1f64,
                             bound in 0.0..0.3f64) {
            let mut budget = ErrorBudget::default();
            let set = |b: &mut ErrorBudget, k: usize, a: AxisBudget| match k {
                0 => b.longitudinal = a,
                1 => b.lateral = a,
                _ => b.vertical = a,
            };
            let base = AxisBudget { pose_estimate_error: p, vio_drift: v, tracking_error: t };
            set(&mut budget, axis, base);
            let mut bigger = base;
            let bump = |x: f64| x + grow * if x >= 0.0 { 1.0 } else { -1.0 };
            match which {
                0 => bigger.pose_estimate_error = bump(p),
                1 => bigger.vio_drift = bump(v),
                _ => bigger.tracking_error = bump(t),
            }
            let mut budget2 = budget;
            set(&mut budget2, axis, bigger);
            let bounds = ErrorBounds { longitudinal: bound, lateral: bound, vertical: bound };
            let (c1, c2) = (classify(&budget, &bounds), classify(&budget2, &bounds));
            for (a, b) in [(c1.longitudinal, c2.longitudinal), (c1.lateral, c2.lateral), (c1.vertical, c2.vertical)] {
                prop_assert!(b.effective_total >= a.effective_total);
                prop_assert!(b.total >= a.total);
                prop_assert!(a.within || !b.within);
            }
        }
    }
}
