//! Speed-dependent acceleration envelopes (g-g-v diagrams).
//!
//! The feasible set at speed v is the superellipse
//! `(|ax|/ax_lim(v))^p + (|ay|/ay_max(v))^p <= 1`, with direction-asymmetric
//! longitudinal limits (drive vs brake) interpolated piecewise-linearly over
//! speed knots and held constant beyond the table, plus a hard top-speed cap.
//! p = 2 is the plain ellipse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GgvError {
    #[error("envelope needs at least one speed knot")]
    NoKnots,
    #[error("speed knots must start at 0 and increase strictly (knot {0})")]
    BadKnotOrder(usize),
    #[error("non-positive limit at knot {0}")]
    NonPositiveLimit(usize),
    #[error("v_max must be positive, got {0}")]
    BadVmax(f64),
    #[error("shape exponent must be >= 1, got {0}")]
    BadExponent(f64),
    #[error("preset file parse: {0}")]
    Parse(String),
    #[error("preset file io: {0}")]
    Io(#[from] std::io::Error),
}

/// Acceleration limits at one speed knot; `ax_dec_max` is a positive
/// braking magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GgvKnot {
    pub v: f64,
    pub ay_max: f64,
    pub ax_acc_max: f64,
    pub ax_dec_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgvDiagram {
    pub knots: Vec<GgvKnot>,
    pub v_max: f64,
    pub shape_exponent: f64,
}

/// Remaining longitudinal budget per direction, positive magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxBudget {
    pub ax_acc: f64,
    pub ax_dec: f64,
}

impl GgvDiagram {
    pub fn new(knots: Vec<GgvKnot>, v_max: f64, shape_exponent: f64) -> Result<Self, GgvError> {
        let g = Self { knots, v_max, shape_exponent };
        g.validate()?;
        Ok(g)
    }

    /// Single-knot envelope: speed-independent limits.
    pub fn constant(
        ay_max: f64,
        ax_acc_max: f64,
        ax_dec_max: f64,
        v_max: f64,
        shape_exponent: f64,
    ) -> Result<Self, GgvError> {
        Self::new(
            vec![GgvKnot { v: 0.0, ay_max, ax_acc_max, ax_dec_max }],
            v_max,
            shape_exponent,
        )
    }

    pub fn validate(&self) -> Result<(), GgvError> {
        if self.knots.is_empty() {
            return Err(GgvError::NoKnots);
        }
        if self.knots[0].v != 0.0 {
            return Err(GgvError::BadKnotOrder(0));
        }
        for (i, k) in self.knots.iter().enumerate() {
            if i > 0 && k.v <= self.knots[i - 1].v {
                return Err(GgvError::BadKnotOrder(i));
            }
            if k.ay_max <= 0.0 || k.ax_acc_max <= 0.0 || k.ax_dec_max <= 0.0 {
                return Err(GgvError::NonPositiveLimit(i));
            }
        }
        if !(self.v_max > 0.0) {
            return Err(GgvError::BadVmax(self.v_max));
        }
        if !(self.shape_exponent >= 1.0) {
            return Err(GgvError::BadExponent(self.shape_exponent));
        }
        Ok(())
    }

    /// Piecewise-linear interpolation over the knot table, held constant
    /// beyond both ends.
    fn interp(&self, v: f64, f: impl Fn(&GgvKnot) -> f64) -> f64 {
        let ks = &self.knots;
        if v <= ks[0].v {
            return f(&ks[0]);
        }
        let last = ks.len() - 1;
        if v >= ks[last].v {
            return f(&ks[last]);
        }
        let hi = ks.partition_point(|k| k.v <= v);
        let (a, b) = (&ks[hi - 1], &ks[hi]);
        let t = (v - a.v) / (b.v - a.v);
        f(a) + (f(b) - f(a)) * t
    }

    pub fn ay_max_at(&self, v: f64) -> f64 {
        self.interp(v, |k| k.ay_max)
    }

    pub fn ax_acc_max_at(&self, v: f64) -> f64 {
        self.interp(v, |k| k.ax_acc_max)
    }

    pub fn ax_dec_max_at(&self, v: f64) -> f64 {
        self.interp(v, |k| k.ax_dec_max)
    }

    /// Envelope membership with relative slack on both the speed cap and
    /// the superellipse radius.
    pub fn contains(&self, v: f64, ax: f64, ay: f64, slack: f64) -> bool {
        if v > self.v_max * (1.0 + slack) {
            return false;
        }
        let ax_lim = if ax >= 0.0 { self.ax_acc_max_at(v) } else { self.ax_dec_max_at(v) };
        let p = self.shape_exponent;
        let lhs = (ax.abs() / ax_lim).powf(p) + (ay.abs() / self.ay_max_at(v)).powf(p);
        lhs <= (1.0 + slack).powf(p)
    }

    /// Longitudinal budget left over after spending `ay` laterally.
    pub fn available_ax(&self, v: f64, ay: f64) -> AxBudget {
        let p = self.shape_exponent;
        let frac = (ay.abs() / self.ay_max_at(v)).powf(p);
        let scale = (1.0 - frac).max(0.0).powf(1.0 / p);
        AxBudget {
            ax_acc: self.ax_acc_max_at(v) * scale,
            ax_dec: self.ax_dec_max_at(v) * scale,
        }
    }

    /// Largest speed not exceeding `v_max` whose steady cornering at
    /// curvature `rho` stays within the lateral limit. Bisection to 1e-6;
    /// the predicate `v^2 |rho| <= ay_max(v)` is monotone past its first
    /// crossing because ay_max is piecewise-linear and v^2|rho| convex.
    pub fn max_cornering_speed(&self, rho: f64) -> f64 {
        let k = rho.abs();
        if k == 0.0 {
            return self.v_max;
        }
        let ok = |v: f64| v * v * k <= self.ay_max_at(v);
        if ok(self.v_max) {
            return self.v_max;
        }
        let (mut lo, mut hi) = (0.0f64, self.v_max);
        while hi - lo > 1e-6 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn to_toml_string(&self) -> String {
        // serde order: knots table last so scalars stay at the top
        #[derive(Serialize)]
        struct File<'a> {
            v_max: f64,
            shape_exponent: f64,
            knots: &'a [GgvKnot],
        }
        toml::to_string_pretty(&File {
            v_max: self.v_max,
            shape_exponent: self.shape_exponent,
            knots: &self.knots,
        })
        .expect("envelope serialization cannot fail")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, GgvError> {
        let g: GgvDiagram = toml::from_str(text).map_err(|e| GgvError::Parse(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn read_toml(path: &std::path::Path) -> Result<Self, GgvError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_toml(&self, path: &std::path::Path) -> Result<(), GgvError> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Copy with every acceleration table entry scaled; the top-speed cap
    /// is left alone (the expansion search grows accelerations only).
    pub fn scaled(&self, factor: f64) -> Self {
        let knots = self
            .knots
            .iter()
            .map(|k| GgvKnot {
                v: k.v,
                ay_max: k.ay_max * factor,
                ax_acc_max: k.ax_acc_max * factor,
                ax_dec_max: k.ax_dec_max * factor,
            })
            .collect();
        Self { knots, v_max: self.v_max, shape_exponent: self.shape_exponent }
    }

    /// True when every limit of `self` is >= the matching limit of `other`
    /// at a dense set of probe speeds.
    pub fn dominates(&self, other: &Self) -> bool {
        (0..=100).all(|i| {
            let v = self.v_max.max(other.v_max) * i as f64 / 100.0;
            self.ay_max_at(v) >= other.ay_max_at(v)
                && self.ax_acc_max_at(v) >= other.ax_acc_max_at(v)
                && self.ax_dec_max_at(v) >= other.ax_dec_max_at(v)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cautious() -> GgvDiagram {
        GgvDiagram::constant(3.0, 1.0, 1.0, 5.0, 2.0).unwrap()
    }

    fn speed_dependent() -> GgvDiagram {
        GgvDiagram::new(
            vec![
                GgvKnot { v: 0.0, ay_max: 4.0, ax_acc_max: 2.0, ax_dec_max: 2.5 },
                GgvKnot { v: 2.0, ay_max: 3.5, ax_acc_max: 1.6, ax_dec_max: 2.2 },
                GgvKnot { v: 4.0, ay_max: 2.8, ax_acc_max: 1.0, ax_dec_max: 2.0 },
            ],
            5.0,
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn boundary_membership() {
        let g = cautious();
        assert!(g.contains(2.0, 0.0, 3.0, 0.0));
        assert!(g.contains(2.0, 0.0, 0.0, 0.0));
        assert!(!g.contains(2.0, 1.0, 3.0, 0.0));
        assert!(!g.contains(5.1, 0.0, 0.0, 0.0));
    }

    #[test]
    fn available_ax_cases() {
        let g = cautious();
        let full = g.available_ax(1.0, 0.0);
        assert_abs_diff_eq!(full.ax_acc, 1.0);
        assert_abs_diff_eq!(full.ax_dec, 1.0);
        let spent = g.available_ax(1.0, 3.0);
        assert_abs_diff_eq!(spent.ax_acc, 0.0);
        assert_abs_diff_eq!(spent.ax_dec, 0.0);
        // sqrt(1 - 3/4) = 1/2
        let half = g.available_ax(1.0, 3.0 * 3f64.sqrt() / 2.0);
        assert_abs_diff_eq!(half.ax_acc, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn cornering_speed_cases() {
        let g = cautious();
        assert_abs_diff_eq!(g.max_cornering_speed(0.0), 5.0);
        assert_abs_diff_eq!(g.max_cornering_speed(0.75), 2.0, epsilon = 1e-5);
        assert_abs_diff_eq!(g.max_cornering_speed(-0.75), 2.0, epsilon = 1e-5);
    }

    #[test]
    fn cornering_speed_matches_dense_scan() {
        let g = speed_dependent();
        for rho in [0.05, 0.2, 0.4, 0.8, 1.5] {
            let fast = g.max_cornering_speed(rho);
            // dense 1e-4 scan oracle
            let mut best = 0.0f64;
            let steps = (g.v_max / 1e-4) as usize;
            for i in 0..=steps {
                let v = i as f64 * 1e-4;
                if v * v * rho <= g.ay_max_at(v) {
                    best = v;
                } else {
                    break;
                }
            }
            assert!((fast - best).abs() < 2e-4, "rho={rho}: {fast} vs {best}");
        }
    }

    #[test]
    fn preset_file_round_trip() {
        let g = speed_dependent();
        let text = g.to_toml_string();
        let back = GgvDiagram::from_toml_str(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn scaling_dominates() {
        let g = speed_dependent();
        assert!(g.scaled(1.2).dominates(&g));
        assert!(!g.dominates(&g.scaled(1.2)));
    }

    proptest! {
        #[test]
        fn available_ax_monotone_in_ay(ay1 in 0.0..4.0f64, ay2 in 0.0..4.0f64, v in 0.0..5.0f64) {
            let g = speed_dependent();
            let (lo, hi) = if ay1 < ay2 { (ay1, ay2) } else { (ay2, ay1) };
            let a = g.available_ax(v, lo);
            let b = g.available_ax(v, hi);
            prop_assert!(a.ax_acc >= b.ax_acc);
            prop_assert!(a.ax_dec >= b.ax_dec);
        }

        #[test]
        fn boundary_points_are_members(v in 0.0..5.0f64, frac in 0.0..1.0f64) {
            let g = speed_dependent();
            let ay = frac * g.ay_max_at(v);
            let budget = g.available_ax(v, ay);
            prop_assert!(g.contains(v, budget.ax_acc, ay, 1e-9));
            prop_assert!(g.contains(v, -budget.ax_dec, ay, 1e-9));
        }

        #[test]
        fn cornering_speed_monotone_in_rho(r1 in 0.0..2.0f64, r2 in 0.0..2.0f64) {
            let g = speed_dependent();
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(g.max_cornering_speed(lo) >= g.max_cornering_speed(hi) - 1e-9);
        }
    }
}
