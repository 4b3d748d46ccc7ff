//! Finite-horizon time-optimal speed profiles over sampled curvature.
//!
//! `plan_speed` is a forward-backward solver: a pointwise cornering cap,
//! a backward pass that enforces braking feasibility, and a forward pass
//! that enforces drive-acceleration feasibility. The result is the
//! pointwise minimum of the three and is maximal: raising any sample
//! breaks a constraint. `dp_speed_oracle` solves the same discrete
//! problem by brute-force dynamic programming for cross-checking.

use crate::ggv::GgvDiagram;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VelocityError {
    #[error("curvature profile needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("grid step must be positive, got {0}")]
    BadStep(f64),
    #[error("initial speed must be non-negative, got {0}")]
    NegativeV0(f64),
    #[error("non-finite curvature sample at index {0}")]
    NonFinite(usize),
}

/// Speed/acceleration profile on a uniform arc-length grid.
///
/// `ax[i]` is the longitudinal acceleration held over the interval
/// [s[i], s[i+1]], so `v[i+1]^2 = v[i]^2 + 2 ax[i] ds` holds exactly;
/// the last entry is 0 (nothing beyond the horizon). `ay[i] = v[i]^2 rho[i]`.
/// When the requested initial speed was infeasible the plan starts from
/// the clamped value and `v0_excess` carries the overshoot in m/s.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedPlan {
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    pub ax: Vec<f64>,
    pub ay: Vec<f64>,
    pub v0_excess: f64,
}

impl SpeedPlan {
    /// Sum of per-interval times 2*ds/(v[i]+v[i+1]); infinite if the plan
    /// is stationary somewhere.
    pub fn traversal_time(&self) -> f64 {
        let mut t = 0.0;
        for i in 0..self.v.len() - 1 {
            t += 2.0 * (self.s[i + 1] - self.s[i]) / (self.v[i] + self.v[i + 1]);
        }
        t
    }
}

fn check_inputs(rho: &[f64], ds: f64, v0: f64) -> Result<(), VelocityError> {
    if rho.len() < 2 {
        return Err(VelocityError::TooShort(rho.len()));
    }
    if !(ds > 0.0) || !ds.is_finite() {
        return Err(VelocityError::BadStep(ds));
    }
    if !(v0 >= 0.0) || !v0.is_finite() {
        return Err(VelocityError::NegativeV0(v0));
    }
    if let Some(i) = rho.iter().position(|r| !r.is_finite()) {
        return Err(VelocityError::NonFinite(i));
    }
    Ok(())
}

/// One backward step: the fastest speed at the upstream cell from which
/// the envelope can still brake down to `v_next` over `ds`, with the
/// braking budget evaluated at the upstream cell itself (speed unknown,
/// lateral demand v^2 rho). Three seeded fixed-point iterations get the
/// root to ~1e-4; a bisection then pins it so the stored triple sits on
/// the envelope boundary to near machine precision.
fn backward_step(ggv: &GgvDiagram, rho: f64, v_next: f64, cap: f64, ds: f64) -> f64 {
    let g = |u: f64| u * u - v_next * v_next - 2.0 * ggv.available_ax(u, u * u * rho).ax_dec * ds;

    let mut u = v_next;
    let mut residual = 0.0;
    for _ in 0..3 {
        let a = ggv.available_ax(u, u * u * rho).ax_dec;
        let next = (v_next * v_next + 2.0 * a * ds).sqrt();
        residual = (next - u).abs();
        u = next;
    }
    // The iteration lands within ~1e-3 except right at the lateral-limit
    // boundary, where the budget has a square-root singularity and
    // contraction slows; the bisection below absorbs that case.
    debug_assert!(residual < 0.05, "braking fixed point diverged: residual {residual}");

    if cap <= v_next {
        return cap;
    }
    let dec_bound = ggv.knots.iter().map(|k| k.ax_dec_max).fold(0.0f64, f64::max);
    let hi = cap.min((v_next * v_next + 2.0 * dec_bound * ds).sqrt());
    if g(hi) <= 0.0 {
        // unconstrained root lies beyond the cornering cap
        return hi;
    }
    let (mut lo, mut hi) = (v_next, hi);
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Plan the fastest feasible speed profile over curvature samples `rho`
/// spaced `ds` apart, starting at `v0` and ending no faster than
/// `v_terminal_cap`. Acceleration budgets are always evaluated at the
/// interval's upstream cell, so every stored (v, ax, ay) triple is an
/// envelope member.
pub fn plan_speed(
    rho: &[f64],
    ds: f64,
    v0: f64,
    ggv: &GgvDiagram,
    v_terminal_cap: f64,
) -> Result<SpeedPlan, VelocityError> {
    check_inputs(rho, ds, v0)?;
    let n = rho.len();

    let caps: Vec<f64> = rho.iter().map(|r| ggv.max_cornering_speed(*r)).collect();

    let mut v = caps.clone();
    v[n - 1] = v[n - 1].min(v_terminal_cap.max(0.0));
    for i in (0..n - 1).rev() {
        let bwd = backward_step(ggv, rho[i], v[i + 1], caps[i], ds);
        v[i] = v[i].min(bwd);
    }

    let v0_excess = (v0 - v[0]).max(0.0);
    v[0] = v[0].min(v0);
    for i in 0..n - 1 {
        let budget = ggv.available_ax(v[i], v[i] * v[i] * rho[i]);
        let reach = (v[i] * v[i] + 2.0 * budget.ax_acc * ds).sqrt();
        v[i + 1] = v[i + 1].min(reach);
    }

    let s = (0..n).map(|i| i as f64 * ds).collect();
    let ay = (0..n).map(|i| v[i] * v[i] * rho[i]).collect();
    let mut ax = vec![0.0; n];
    for i in 0..n - 1 {
        ax[i] = (v[i + 1] * v[i + 1] - v[i] * v[i]) / (2.0 * ds);
    }
    Ok(SpeedPlan { s, v, ax, ay, v0_excess })
}

/// Minimum traversal time over a (position x speed-bin) lattice with the
/// same departure-cell feasibility rule as `plan_speed`. Exact up to the
/// bin spacing; refining `n_speed_bins` on a nested grid (doubling) never
/// increases the value. Small instances only: cost is O(N * bins^2).
pub fn dp_speed_oracle(
    rho: &[f64],
    ds: f64,
    v0: f64,
    ggv: &GgvDiagram,
    v_terminal_cap: f64,
    n_speed_bins: usize,
) -> f64 {
    let n = rho.len();
    assert!(n >= 2 && n_speed_bins >= 1);
    let caps: Vec<f64> = rho.iter().map(|r| ggv.max_cornering_speed(*r)).collect();
    // Lattice top from forward reachability, not v_max: bins go where the
    // profile can actually live. Bins are uniform in v^2, which makes a
    // constant-acceleration step a constant lattice shift, so rounding lag
    // on long ramps stays at one bin instead of compounding. Both choices
    // are bin-count independent, keeping refinements nested.
    let acc_bound = ggv.knots.iter().map(|k| k.ax_acc_max).fold(0.0f64, f64::max);
    let mut ub = v0.min(caps[0]);
    let mut top = ub;
    for &c in caps.iter().skip(1) {
        ub = (ub * ub + 2.0 * acc_bound * ds).sqrt().min(c);
        top = top.max(ub);
    }
    let e_top = top * top;
    let grid: Vec<f64> = (0..=n_speed_bins)
        .map(|k| (e_top * k as f64 / n_speed_bins as f64).sqrt())
        .collect();

    let pos_cap = |i: usize| {
        if i == n - 1 {
            caps[i].min(v_terminal_cap.max(0.0))
        } else {
            caps[i]
        }
    };
    // Per-position speed states: grid values under the local cap, plus two
    // bin-count-independent extras so refinements stay nested while the
    // lattice can represent the profile's natural ridgelines exactly: the
    // cap itself (lateral-limited stretches), and the full-throttle greedy
    // chain from v0 (acceleration ramps, which a uniform lattice tracks
    // poorly because each cell's reach lands a fraction of a bin off).
    // The chain ignores braking entirely; whether any of its states are
    // usable is still decided by the DP's own transition checks.
    let mut chain = vec![0.0f64; n];
    chain[0] = v0.min(caps[0]);
    for i in 0..n - 1 {
        let u = chain[i];
        let budget = ggv.available_ax(u, u * u * rho[i]);
        chain[i + 1] = (u * u + 2.0 * budget.ax_acc * ds).sqrt().min(pos_cap(i + 1));
    }
    let states: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = pos_cap(i);
            let mut s: Vec<f64> =
                grid.iter().copied().take_while(|&g| g <= c + 1e-12).collect();
            for extra in [chain[i], c] {
                if s.iter().all(|&x| (x - extra).abs() > 1e-12) && extra <= c + 1e-12 {
                    s.push(extra);
                }
            }
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s
        })
        .collect();

    // best[j]: minimum time to arrive at states[i][j] for the current i
    let v0c = v0.min(caps[0]);
    let budget0 = ggv.available_ax(v0c, v0c * v0c * rho[0]);
    let mut best: Vec<f64> = states[1]
        .iter()
        .map(|&w| {
            let dv2 = w * w - v0c * v0c;
            if dv2 >= -2.0 * budget0.ax_dec * ds - 1e-12
                && dv2 <= 2.0 * budget0.ax_acc * ds + 1e-12
            {
                2.0 * ds / (v0c + w)
            } else {
                f64::INFINITY
            }
        })
        .collect();

    for i in 1..n - 1 {
        let mut next = vec![f64::INFINITY; states[i + 1].len()];
        for (k, &u) in states[i].iter().enumerate() {
            if !best[k].is_finite() {
                continue;
            }
            let budget = ggv.available_ax(u, u * u * rho[i]);
            let lo2 = (u * u - 2.0 * budget.ax_dec * ds).max(0.0) - 1e-12;
            let hi2 = u * u + 2.0 * budget.ax_acc * ds + 1e-12;
            for (kk, &w) in states[i + 1].iter().enumerate() {
                let w2 = w * w;
                if w2 > hi2 {
                    break;
                }
                if w2 < lo2 {
                    continue;
                }
                let t = best[k] + 2.0 * ds / (u + w);
                if t < next[kk] {
                    next[kk] = t;
                }
            }
        }
        best = next;
    }
    best.into_iter().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ggv::{GgvDiagram, GgvKnot};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cautious() -> GgvDiagram {
        GgvDiagram::constant(3.0, 1.0, 1.0, 5.0, 2.0).unwrap()
    }

    fn sloped() -> GgvDiagram {
        GgvDiagram::new(
            vec![
                GgvKnot { v: 0.0, ay_max: 4.0, ax_acc_max: 2.0, ax_dec_max: 2.5 },
                GgvKnot { v: 1.5, ay_max: 3.6, ax_acc_max: 1.7, ax_dec_max: 2.3 },
                GgvKnot { v: 3.0, ay_max: 3.0, ax_acc_max: 1.2, ax_dec_max: 2.0 },
            ],
            3.5,
            2.0,
        )
        .unwrap()
    }

    fn smooth_rho(rng: &mut ChaCha8Rng, n: usize, max_abs: f64) -> Vec<f64> {
        let mut rho = Vec::with_capacity(n);
        let mut r = rng.gen_range(-max_abs * 0.5..max_abs * 0.5);
        for _ in 0..n {
            r += rng.gen_range(-0.08..0.08);
            r = r.clamp(-max_abs, max_abs);
            rho.push(r);
        }
        rho
    }

    fn check_plan_invariants(plan: &SpeedPlan, rho: &[f64], ds: f64, ggv: &GgvDiagram) {
        let n = rho.len();
        for i in 0..n {
            assert!(plan.v[i] >= 0.0);
            assert_eq!(plan.ay[i], plan.v[i] * plan.v[i] * rho[i]);
            assert!(
                ggv.contains(plan.v[i], plan.ax[i], plan.ay[i], 1e-6),
                "cell {i}: v={} ax={} ay={} outside envelope",
                plan.v[i],
                plan.ax[i],
                plan.ay[i]
            );
            if i + 1 < n {
                let lhs = plan.v[i + 1] * plan.v[i + 1];
                let rhs = plan.v[i] * plan.v[i] + 2.0 * plan.ax[i] * ds;
                assert!((lhs - rhs).abs() < 1e-6, "cell {i}: kinematic gap {}", lhs - rhs);
            }
        }
    }

    #[test]
    fn straight_from_rest_matches_closed_form() {
        let ggv = GgvDiagram::constant(3.0, 1.0, 1.0, 2.0, 2.0).unwrap();
        let rho = vec![0.0; 81];
        let ds = 0.05;
        let plan = plan_speed(&rho, ds, 0.0, &ggv, ggv.v_max).unwrap();
        for (i, &v) in plan.v.iter().enumerate() {
            let want = (2.0 * (i as f64 * ds)).sqrt().min(2.0);
            assert!((v - want).abs() < 1e-12, "i={i}: {v} vs {want}");
        }
        check_plan_invariants(&plan, &rho, ds, &ggv);
    }

    #[test]
    fn steady_cornering_holds_cap() {
        let ggv = cautious();
        let rho = vec![0.75; 40];
        let plan = plan_speed(&rho, 0.05, 2.0, &ggv, 2.0).unwrap();
        for &v in &plan.v {
            assert!((v - 2.0).abs() < 1e-5, "{v}");
        }
        for &a in &plan.ax {
            assert!(a.abs() < 1e-4, "{a}");
        }
        check_plan_invariants(&plan, &rho, 0.05, &ggv);
        // the cornering cap is itself bisected to 1e-6, so the requested
        // speed may poke over it by that much
        assert!(plan.v0_excess < 1e-5);
    }

    #[test]
    fn infeasible_start_is_clamped_and_reported() {
        let ggv = cautious();
        let rho = vec![1.5; 30];
        let plan = plan_speed(&rho, 0.05, 10.0, &ggv, 5.0).unwrap();
        let cap = ggv.max_cornering_speed(1.5);
        assert!((plan.v[0] - cap).abs() < 1e-5);
        assert!((plan.v0_excess - (10.0 - plan.v[0])).abs() < 1e-9);
        check_plan_invariants(&plan, &rho, 0.05, &ggv);
    }

    #[test]
    fn plan_invariants_on_random_profiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let ggv = if trial % 2 == 0 { cautious() } else { sloped() };
            let n = rng.gen_range(20..120);
            let rho = smooth_rho(&mut rng, n, 1.5);
            let ds = 0.05;
            let v_term = 0.9 * ggv.max_cornering_speed(rho[n - 1]);
            let v0 = rng.gen_range(0.0..1.5);
            let plan = plan_speed(&rho, ds, v0, &ggv, v_term).unwrap();
            check_plan_invariants(&plan, &rho, ds, &ggv);
            assert!(plan.v[0] <= v0 + 1e-12);
        }
    }

    #[test]
    fn matches_dp_oracle_on_random_profiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let ggv = if trial % 2 == 0 { cautious() } else { sloped() };
            let n = rng.gen_range(20..=60);
            let rho = smooth_rho(&mut rng, n, 1.2);
            let ds = 0.05;
            let v_term = ggv.max_cornering_speed(rho[n - 1]);
            let v0 = rng.gen_range(0.3..1.2);
            let plan = plan_speed(&rho, ds, v0, &ggv, v_term).unwrap();
            let t_plan = plan.traversal_time();
            let t_dp = dp_speed_oracle(&rho, ds, v0, &ggv, v_term, 200);
            assert!(t_plan <= t_dp + 1e-9, "trial {trial}: plan {t_plan} slower than DP {t_dp}");
            assert!(
                t_dp <= t_plan * 1.02,
                "trial {trial}: DP {t_dp} not within 2% of plan {t_plan}"
            );
        }
    }

    #[test]
    fn dp_trivial_cases() {
        let ggv = GgvDiagram::constant(3.0, 1.0, 1.0, 2.0, 2.0).unwrap();
        // cruising a straight at the cap: time = L / v_max
        let rho = vec![0.0; 21];
        let t = dp_speed_oracle(&rho, 0.05, 2.0, &ggv, 2.0, 100);
        assert!((t - 1.0 / 2.0).abs() < 1e-9, "{t}");
        // single interval from rest: v1 = sqrt(2 a ds), t = 2 ds / v1;
        // the lattice top is exactly the reachable speed, so the optimum
        // is hit exactly
        let t1 = dp_speed_oracle(&[0.0, 0.0], 0.05, 0.0, &ggv, 10.0, 400);
        let v1 = (2.0f64 * 1.0 * 0.05).sqrt();
        assert!((t1 - 2.0 * 0.05 / v1).abs() < 1e-9, "{t1}");
    }

    #[test]
    fn dp_refinement_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let ggv = sloped();
            let rho = smooth_rho(&mut rng, 30, 1.0);
            let v_term = ggv.max_cornering_speed(rho[29]);
            let t50 = dp_speed_oracle(&rho, 0.05, 0.5, &ggv, v_term, 50);
            let t100 = dp_speed_oracle(&rho, 0.05, 0.5, &ggv, v_term, 100);
            let t200 = dp_speed_oracle(&rho, 0.05, 0.5, &ggv, v_term, 200);
            assert!(t100 <= t50 + 1e-12);
            assert!(t200 <= t100 + 1e-12);
        }
    }

    #[test]
    fn plan_dominates_random_feasible_profiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for trial in 0..5 {
            let ggv = if trial % 2 == 0 { cautious() } else { sloped() };
            let n = 60;
            let rho = smooth_rho(&mut rng, n, 1.2);
            let ds = 0.05;
            let caps: Vec<f64> = rho.iter().map(|r| ggv.max_cornering_speed(*r)).collect();
            let v_term = caps[n - 1];
            let v0 = 0.5;
            let plan = plan_speed(&rho, ds, v0, &ggv, v_term).unwrap();
            for _ in 0..1000 {
                // random envelope-feasible profile built cell by cell
                let mut u = v0;
                for i in 0..n - 1 {
                    assert!(u <= plan.v[i] + 1e-9, "trial {trial} cell {i}: {u} > {}", plan.v[i]);
                    let budget = ggv.available_ax(u, u * u * rho[i]);
                    let cap_next = if i + 1 == n - 1 { caps[i + 1].min(v_term) } else { caps[i + 1] };
                    let a_hi = budget.ax_acc.min((cap_next * cap_next - u * u) / (2.0 * ds));
                    let a_lo = -budget.ax_dec;
                    assert!(a_hi >= a_lo - 1e-12, "sampler interval empty");
                    let a = rng.gen_range(a_lo..=a_hi.max(a_lo));
                    u = (u * u + 2.0 * a * ds).max(0.0).sqrt();
                }
                assert!(u <= plan.v[n - 1] + 1e-9);
            }
        }
    }

    #[test]
    fn longer_horizon_never_slows_the_interior() {
        // beyond one full braking distance from the short horizon's end,
        // both plans see identical binding constraints
        let ggv = GgvDiagram::constant(3.0, 1.5, 2.0, 3.0, 2.0).unwrap();
        let ds = 0.05;
        let brake_cells =
            (ggv.v_max * ggv.v_max / (2.0 * 2.0) / ds).ceil() as usize + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..10 {
            let long_n = 240;
            let short_n = 120;
            let rho = smooth_rho(&mut rng, long_n, 1.3);
            let term = |r: f64| 0.9 * ggv.max_cornering_speed(r);
            let v0 = 0.4;
            let short = plan_speed(&rho[..short_n], ds, v0, &ggv, term(rho[short_n - 1])).unwrap();
            let long = plan_speed(&rho, ds, v0, &ggv, term(rho[long_n - 1])).unwrap();
            for i in 0..short_n - brake_cells {
                assert!(
                    long.v[i] >= short.v[i] - 1e-9,
                    "cell {i}: long {} < short {}",
                    long.v[i],
                    short.v[i]
                );
            }
        }
    }
}
