//! Geometric path tracking. Two controllers turn the vehicle pose plus the
//! raceline into a forward curvature reference: a pure-pursuit arc to a
//! speed-scheduled look-ahead point, and a curvature-continuous spiral
//! connection. Both fill the remainder of the horizon with raceline
//! curvature past the look-ahead point. The kinematic steering map turns
//! one curvature sample into a steering angle.

use crate::geometry::{fit_g2_spiral, wrap_angle, PoseCurv};
use crate::raceline::Raceline;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shortest curvature reference a controller will emit, in meters.
pub const MIN_HORIZON: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("look-ahead schedule needs matching non-empty knot lists")]
    BadKnots,
    #[error("look-ahead speed knots must increase strictly")]
    NonIncreasingSpeed,
    #[error("look-ahead distances must be positive and non-decreasing")]
    BadLookahead,
}

/// Piecewise-linear look-ahead distance vs speed, held constant beyond the
/// end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookaheadSchedule {
    pub v_knots: Vec<f64>,
    pub ld_knots: Vec<f64>,
}

impl LookaheadSchedule {
    pub fn new(v_knots: Vec<f64>, ld_knots: Vec<f64>) -> Result<Self, ControlError> {
        let s = Self { v_knots, ld_knots };
        s.validate()?;
        Ok(s)
    }

    /// Tuned span for the arc controller: shorter previews at low speed.
    pub fn pure_pursuit_default() -> Self {
        Self::new(vec![1.0, 4.0], vec![0.8, 1.4]).unwrap()
    }

    /// The spiral connection is more sensitive to short previews, so its
    /// schedule starts longer.
    pub fn clothoid_default() -> Self {
        Self::new(vec![1.0, 4.0], vec![1.0, 1.4]).unwrap()
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if self.v_knots.is_empty() || self.v_knots.len() != self.ld_knots.len() {
            return Err(ControlError::BadKnots);
        }
        if self.v_knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ControlError::NonIncreasingSpeed);
        }
        if self.ld_knots.iter().any(|&l| !(l > 0.0))
            || self.ld_knots.windows(2).any(|w| w[1] < w[0])
        {
            return Err(ControlError::BadLookahead);
        }
        Ok(())
    }

    pub fn lookahead(&self, v: f64) -> f64 {
        let k = &self.v_knots;
        let l = &self.ld_knots;
        if v <= k[0] {
            return l[0];
        }
        let n = k.len();
        if v >= k[n - 1] {
            return l[n - 1];
        }
        let hi = k.partition_point(|&g| g <= v);
        let (i, j) = (hi - 1, hi);
        let t = (v - k[i]) / (k[j] - k[i]);
        l[i] + (l[j] - l[i]) * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    PurePursuit,
    Clothoid,
}

/// Curvature samples at uniform spacing from the vehicle forward, plus the
/// projection used to anchor them.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureReference {
    pub rho: Vec<f64>,
    pub ds: f64,
    pub source: ControllerKind,
    pub s_proj: f64,
    pub lateral_error: f64,
}

impl CurvatureReference {
    /// Curvature at forward distance d, linearly interpolated on the
    /// sample grid and clamped to the emitted horizon.
    pub fn sample_at(&self, d: f64) -> f64 {
        let n = self.rho.len();
        let fi = (d.max(0.0) / self.ds).min((n - 1) as f64);
        let i = fi.floor() as usize;
        let j = (i + 1).min(n - 1);
        let tau = fi - i as f64;
        self.rho[i] + (self.rho[j] - self.rho[i]) * tau
    }
}

/// Arc length a preview window of `w+1` samples at period `t_s` covers at
/// the given speed, floored at MIN_HORIZON so the reference stays usable
/// when nearly stopped.
pub fn curvature_horizon(v_plan: f64, w: usize, t_s: f64) -> f64 {
    (v_plan * (w as f64 + 1.0) * t_s).max(MIN_HORIZON)
}

/// delta = atan(rho L). The actuator range clamp belongs to the plant,
/// which knows its own limits.
pub fn kinematic_steering(rho: f64, wheelbase: f64) -> f64 {
    debug_assert!(wheelbase > 0.0);
    (rho * wheelbase).atan()
}

fn sample_count(horizon: f64, ds: f64) -> usize {
    (horizon.max(MIN_HORIZON) / ds).ceil() as usize + 1
}

/// Circular-arc connection to the look-ahead point: the arc holds
/// curvature 2 sin(lambda)/l_d until the look-ahead point, then the
/// reference continues with raceline curvature.
pub fn pure_pursuit_curvature(
    pose: PoseCurv,
    v: f64,
    raceline: &Raceline,
    sched: &LookaheadSchedule,
    horizon: f64,
) -> CurvatureReference {
    let path = &raceline.path;
    let proj = path.project(pose.x, pose.y);
    let ld = sched.lookahead(v);
    let s_la = proj.s_star + ld;
    let target = path.sample(s_la);

    let lambda = wrap_angle((target.y - pose.y).atan2(target.x - pose.x) - pose.psi);
    let rho_arc = 2.0 * lambda.sin() / ld;
    // arc length subtending the chord; lambda/sin(lambda) -> 1 at 0
    let arc_len = if lambda.abs() < 1e-9 {
        ld
    } else {
        ld * (lambda / lambda.sin())
    };

    let ds = raceline.grid_step();
    let n = sample_count(horizon, ds);
    let rho = (0..n)
        .map(|k| {
            let d = k as f64 * ds;
            if d <= arc_len {
                rho_arc
            } else {
                path.curvature_at(s_la + (d - arc_len))
            }
        })
        .collect();
    CurvatureReference {
        rho,
        ds,
        source: ControllerKind::PurePursuit,
        s_proj: proj.s_star,
        lateral_error: proj.lateral_error,
    }
}

/// Spiral connection controller. The spiral starts at the caller's pose
/// with the pose's own curvature (on a vehicle, the estimated path
/// curvature r/vx), so the fit anchors to the true state each cycle. The
/// emitted reference starts at the vehicle: its first sample restates the
/// current curvature, so a steering map with no latency model of its own
/// must sample some preview distance into it to get any control
/// authority, while a map that compensates actuation latency internally
/// reads the window from the start. Falls back to pure pursuit when the
/// spiral fit fails.
#[derive(Debug, Clone)]
pub struct ClothoidTracker {
    pub sched: LookaheadSchedule,
    pub fallbacks: u64,
}

/// Preview time at which the direct kinematic map samples the spiral.
/// It laps reliably across the built-in envelopes while leaving part of
/// the actuation latency uncompensated; shorter previews under-lead the
/// actuators and oscillate, much longer ones over-lead and cut corners.
pub const DEFAULT_CL_PREVIEW: f64 = 0.15;

impl ClothoidTracker {
    pub fn new(sched: LookaheadSchedule) -> Self {
        Self { sched, fallbacks: 0 }
    }

    pub fn curvature(
        &mut self,
        pose: PoseCurv,
        v: f64,
        raceline: &Raceline,
        horizon: f64,
    ) -> CurvatureReference {
        let path = &raceline.path;
        let proj = path.project(pose.x, pose.y);
        let ld = self.sched.lookahead(v);
        let s_la = proj.s_star + ld;
        let target = path.sample(s_la);

        match fit_g2_spiral(pose, target) {
            Ok(spiral) => {
                let ds = raceline.grid_step();
                let n = sample_count(horizon, ds);
                let rho = (0..n)
                    .map(|k| {
                        let d = k as f64 * ds;
                        if d <= spiral.s_f {
                            spiral.curvature_at(d)
                        } else {
                            path.curvature_at(s_la + (d - spiral.s_f))
                        }
                    })
                    .collect();
                CurvatureReference {
                    rho,
                    ds,
                    source: ControllerKind::Clothoid,
                    s_proj: proj.s_star,
                    lateral_error: proj.lateral_error,
                }
            }
            Err(_) => {
                self.fallbacks += 1;
                pure_pursuit_curvature(pose, v, raceline, &self.sched, horizon)
            }
        }
    }
}
