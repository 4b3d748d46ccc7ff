//! Track and path geometry: arc-length resampling, curvature estimation,
//! point-to-path projection, and the G2-continuous connecting spiral used
//! by the clothoid controller.
//!
//! Conventions:
//! - all lengths in meters, angles in radians
//! - signed curvature, positive turning left
//! - headings normalized to (-pi, pi]
//! - closed paths store samples on [0, total_len) with an implied wrap
//!   segment from the last sample back to the first

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * std::f64::consts::PI);
    if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn lerp_angle(a: f64, b: f64, t: f64) -> f64 {
    wrap_angle(a + wrap_angle(b - a) * t)
}

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("track needs at least 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error("track sample arrays have mismatched lengths")]
    MismatchedLengths,
    #[error("non-positive corridor width at sample {0}")]
    NonPositiveWidth(usize),
    #[error("duplicate or non-advancing centerline point at sample {0}")]
    DuplicatePoint(usize),
    #[error("closed track endpoints {0:.3e} m apart exceed closure tolerance")]
    OpenEndpoints(f64),
    #[error("corridor self-intersects at sample {index}: |rho|={rho:.3} 1/m against inner half-width {half_width:.3} m")]
    DegenerateCorridor { index: usize, rho: f64, half_width: f64 },
    #[error("non-finite value at sample {0}")]
    NonFinite(usize),
    #[error("invalid resampling step {0}")]
    BadStep(f64),
    #[error("track file parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("track file io: {0}")]
    Io(#[from] std::io::Error),
}

/// Pose with curvature: the boundary condition type for G2 connections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseCurv {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub rho: f64,
}

impl PoseCurv {
    pub fn new(x: f64, y: f64, psi: f64, rho: f64) -> Self {
        Self { x, y, psi: wrap_angle(psi), rho }
    }
}

/// Sampled centerline with per-sample corridor half-widths.
///
/// `w_left`/`w_right` are distances from the centerline to the corridor
/// boundary on each side, measured along the local normal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackDefinition {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w_left: Vec<f64>,
    pub w_right: Vec<f64>,
    pub closed: bool,
}

impl TrackDefinition {
    pub fn new(
        x: Vec<f64>,
        y: Vec<f64>,
        w_left: Vec<f64>,
        w_right: Vec<f64>,
        closed: bool,
    ) -> Result<Self, TrackError> {
        let t = Self { x, y, w_left, w_right, closed };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        let n = self.x.len();
        if self.y.len() != n || self.w_left.len() != n || self.w_right.len() != n {
            return Err(TrackError::MismatchedLengths);
        }
        if n < 10 {
            return Err(TrackError::TooFewSamples(n));
        }
        for i in 0..n {
            if !(self.x[i].is_finite()
                && self.y[i].is_finite()
                && self.w_left[i].is_finite()
                && self.w_right[i].is_finite())
            {
                return Err(TrackError::NonFinite(i));
            }
            if self.w_left[i] <= 0.0 || self.w_right[i] <= 0.0 {
                return Err(TrackError::NonPositiveWidth(i));
            }
            if i > 0 {
                let d = (self.x[i] - self.x[i - 1]).hypot(self.y[i] - self.y[i - 1]);
                if d < 1e-9 {
                    return Err(TrackError::DuplicatePoint(i));
                }
            }
        }
        Ok(())
    }

    /// Parse the plain-text track table: header `x,y,w_left,w_right`, one
    /// sample per row, closed tracks marked by a `# closed=true` comment.
    pub fn from_csv_str(text: &str) -> Result<Self, TrackError> {
        let mut closed = false;
        let mut cols: [Vec<f64>; 4] = Default::default();
        let mut header_seen = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if comment.replace(' ', "").eq_ignore_ascii_case("closed=true") {
                    closed = true;
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                let want = ["x", "y", "w_left", "w_right"];
                let got: Vec<&str> = line.split(',').map(str::trim).collect();
                if got != want {
                    return Err(TrackError::Parse {
                        line: lineno + 1,
                        reason: format!("expected header x,y,w_left,w_right, got {line:?}"),
                    });
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(TrackError::Parse {
                    line: lineno + 1,
                    reason: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            for (k, f) in fields.iter().enumerate() {
                let v: f64 = f.parse().map_err(|e| TrackError::Parse {
                    line: lineno + 1,
                    reason: format!("bad number {f:?}: {e}"),
                })?;
                cols[k].push(v);
            }
        }
        let [x, y, wl, wr] = cols;
        TrackDefinition::new(x, y, wl, wr, closed)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        if self.closed {
            out.push_str("# closed=true\n");
        }
        out.push_str("x,y,w_left,w_right\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.x[i], self.y[i], self.w_left[i], self.w_right[i]
            );
        }
        out
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self, TrackError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), TrackError> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Arc-length-parameterized path sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub s: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub psi: Vec<f64>,
    pub rho: Vec<f64>,
    pub closed: bool,
    /// Full length; for closed paths this exceeds the last grid value by
    /// the wrap segment.
    pub total_len: f64,
}

/// Result of projecting a point onto a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s_star: f64,
    /// Signed distance, positive to the path's left.
    pub lateral_error: f64,
}

impl Path {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    fn wrap_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_len)
        } else {
            s.clamp(0.0, self.total_len)
        }
    }

    /// Grid index and interpolation fraction for an arc-length position.
    fn locate(&self, s: f64) -> (usize, usize, f64) {
        let s = self.wrap_s(s);
        let n = self.s.len();
        // partition_point: first index with grid value > s
        let hi = self.s.partition_point(|&g| g <= s);
        if hi == n {
            if self.closed {
                let span = self.total_len - self.s[n - 1];
                let t = if span > 0.0 { (s - self.s[n - 1]) / span } else { 0.0 };
                return (n - 1, 0, t);
            }
            return (n - 1, n - 1, 0.0);
        }
        if hi == 0 {
            return (0, 0, 0.0);
        }
        let (i, j) = (hi - 1, hi);
        let span = self.s[j] - self.s[i];
        let t = if span > 0.0 { (s - self.s[i]) / span } else { 0.0 };
        (i, j, t)
    }

    /// Interpolated pose and curvature at arc length `s`.
    pub fn sample(&self, s: f64) -> PoseCurv {
        let (i, j, t) = self.locate(s);
        PoseCurv {
            x: lerp(self.x[i], self.x[j], t),
            y: lerp(self.y[i], self.y[j], t),
            psi: lerp_angle(self.psi[i], self.psi[j], t),
            rho: lerp(self.rho[i], self.rho[j], t),
        }
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, j, t) = self.locate(s);
        lerp(self.rho[i], self.rho[j], t)
    }

    /// Closest-point projection with segment interpolation; wraps on
    /// closed paths. Lateral error is signed positive to the path's left.
    pub fn project(&self, px: f64, py: f64) -> Projection {
        let n = self.s.len();
        if n == 1 {
            let dx = px - self.x[0];
            let dy = py - self.y[0];
            let tx = self.psi[0].cos();
            let ty = self.psi[0].sin();
            return Projection { s_star: self.s[0], lateral_error: tx * dy - ty * dx };
        }
        let nseg = if self.closed { n } else { n - 1 };
        let mut best_d2 = f64::INFINITY;
        let mut best = Projection { s_star: 0.0, lateral_error: 0.0 };
        for i in 0..nseg {
            let j = (i + 1) % n;
            let (ax, ay) = (self.x[i], self.y[i]);
            let (bx, by) = (self.x[j], self.y[j]);
            let (dx, dy) = (bx - ax, by - ay);
            let seg_len2 = dx * dx + dy * dy;
            if seg_len2 == 0.0 {
                continue;
            }
            let t = (((px - ax) * dx + (py - ay) * dy) / seg_len2).clamp(0.0, 1.0);
            let (cx, cy) = (ax + t * dx, ay + t * dy);
            let (ex, ey) = (px - cx, py - cy);
            let d2 = ex * ex + ey * ey;
            if d2 < best_d2 {
                best_d2 = d2;
                let seg_s = if j == 0 { self.total_len - self.s[i] } else { self.s[j] - self.s[i] };
                let inv_len = seg_len2.sqrt().recip();
                let cross = (dx * ey - dy * ex) * inv_len;
                let s_star = self.wrap_s(self.s[i] + t * seg_s);
                best = Projection {
                    s_star,
                    lateral_error: cross.signum() * d2.sqrt(),
                };
            }
        }
        best
    }

    /// Consistency checks used by tests: heading matches the local tangent
    /// and stored curvature matches finite differences of the positions.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.s.len();
        if n < 2 {
            return Err("path needs at least 2 samples".into());
        }
        for i in 1..n {
            if self.s[i] <= self.s[i - 1] {
                return Err(format!("non-increasing arc length at {i}"));
            }
        }
        for i in 0..n {
            let (p, q) = if self.closed {
                ((i + n - 1) % n, (i + 1) % n)
            } else {
                (i.saturating_sub(1), (i + 1).min(n - 1))
            };
            let tx = self.x[q] - self.x[p];
            let ty = self.y[q] - self.y[p];
            let tangent = ty.atan2(tx);
            if wrap_angle(tangent - self.psi[i]).abs() > 0.05 {
                return Err(format!("heading off tangent at {i}"));
            }
        }
        Ok(())
    }
}

/// Centerline path bundled with corridor half-widths on the same grid.
#[derive(Debug, Clone)]
pub struct Corridor {
    pub path: Path,
    pub w_left: Vec<f64>,
    pub w_right: Vec<f64>,
}

impl Corridor {
    /// Interpolated half-widths at arc length `s`.
    pub fn half_widths_at(&self, s: f64) -> (f64, f64) {
        let (i, j, t) = self.path.locate(s);
        (lerp(self.w_left[i], self.w_left[j], t), lerp(self.w_right[i], self.w_right[j], t))
    }

    pub fn min_half_width(&self) -> f64 {
        self.w_left
            .iter()
            .chain(self.w_right.iter())
            .fold(f64::INFINITY, |m, &w| m.min(w))
    }
}

/// Resample a track centerline to a uniform arc-length grid with step
/// <= `ds`, estimating heading and smoothed curvature.
pub fn resample_track(track: &TrackDefinition, ds: f64) -> Result<Path, TrackError> {
    Ok(resample_corridor(track, ds)?.path)
}

/// As [`resample_track`] but keeping the interpolated corridor widths.
pub fn resample_corridor(track: &TrackDefinition, ds: f64) -> Result<Corridor, TrackError> {
    track.validate()?;
    if !(ds > 0.0) || !ds.is_finite() {
        return Err(TrackError::BadStep(ds));
    }

    // Closure handling: drop a duplicated closing point so all index
    // arithmetic is modular over distinct samples.
    let mut n_in = track.len();
    let closes = (track.x[n_in - 1] - track.x[0]).hypot(track.y[n_in - 1] - track.y[0]);
    if track.closed && closes < 1e-6 {
        n_in -= 1;
    } else if track.closed && closes > 0.5 {
        return Err(TrackError::OpenEndpoints(closes));
    }

    let x = &track.x[..n_in];
    let y = &track.y[..n_in];

    // Cumulative arc length over input vertices; closed tracks gain the
    // wrap chord.
    let mut cum = vec![0.0; n_in];
    for i in 1..n_in {
        cum[i] = cum[i - 1] + (x[i] - x[i - 1]).hypot(y[i] - y[i - 1]);
    }
    let total = if track.closed {
        cum[n_in - 1] + (x[0] - x[n_in - 1]).hypot(y[0] - y[n_in - 1])
    } else {
        cum[n_in - 1]
    };

    // Heading and curvature at the input resolution. Estimating at input
    // vertices, then interpolating, avoids the chord-sampling noise a
    // second difference over off-vertex interpolated points would amplify.
    let seg = |i: usize| -> f64 {
        // arc step from vertex i to its successor
        if i + 1 < n_in {
            cum[i + 1] - cum[i]
        } else {
            total - cum[n_in - 1]
        }
    };
    let mut psi_in = vec![0.0; n_in];
    let mut rho_in = vec![0.0; n_in];
    for i in 0..n_in {
        let (p, q, h2) = if track.closed {
            ((i + n_in - 1) % n_in, (i + 1) % n_in, seg((i + n_in - 1) % n_in) + seg(i))
        } else if i == 0 {
            (0, 1, cum[1] - cum[0])
        } else if i == n_in - 1 {
            (n_in - 2, n_in - 1, cum[n_in - 1] - cum[n_in - 2])
        } else {
            (i - 1, i + 1, cum[i + 1] - cum[i - 1])
        };
        let dx = (x[q] - x[p]) / h2;
        let dy = (y[q] - y[p]) / h2;
        psi_in[i] = dy.atan2(dx);
        let interior = track.closed || (i > 0 && i < n_in - 1);
        if interior {
            let h = h2 / 2.0;
            let ddx = (x[q] - 2.0 * x[i] + x[p]) / (h * h);
            let ddy = (y[q] - 2.0 * y[i] + y[p]) / (h * h);
            let speed2 = dx * dx + dy * dy;
            rho_in[i] = (dx * ddy - dy * ddx) / speed2.powf(1.5).max(1e-12);
        }
    }
    if !track.closed && n_in >= 3 {
        rho_in[0] = rho_in[1];
        rho_in[n_in - 1] = rho_in[n_in - 2];
    }

    // 5-point moving-average smoothing of curvature.
    let rho_sm: Vec<f64> = (0..n_in)
        .map(|i| {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for k in -2i64..=2 {
                let j = i as i64 + k;
                let j = if track.closed {
                    j.rem_euclid(n_in as i64) as usize
                } else if j < 0 || j >= n_in as i64 {
                    continue;
                } else {
                    j as usize
                };
                acc += rho_in[j];
                cnt += 1.0;
            }
            acc / cnt
        })
        .collect();

    // Uniform output grid with step <= ds.
    let n_out = (total / ds).ceil().max(1.0) as usize;
    let step = total / n_out as f64;
    let count = if track.closed { n_out } else { n_out + 1 };

    let mut out = Corridor {
        path: Path {
            s: Vec::with_capacity(count),
            x: Vec::with_capacity(count),
            y: Vec::with_capacity(count),
            psi: Vec::with_capacity(count),
            rho: Vec::with_capacity(count),
            closed: track.closed,
            total_len: total,
        },
        w_left: Vec::with_capacity(count),
        w_right: Vec::with_capacity(count),
    };

    let mut seg_idx = 0usize;
    for k in 0..count {
        let s = (k as f64 * step).min(total);
        // advance the input segment cursor; monotone in s
        while seg_idx + 1 < n_in && cum[seg_idx + 1] <= s {
            seg_idx += 1;
        }
        let (i, j) = if seg_idx + 1 < n_in { (seg_idx, seg_idx + 1) } else { (n_in - 1, 0) };
        let s0 = cum[i];
        let span = seg(i);
        let t = if span > 0.0 { ((s - s0) / span).clamp(0.0, 1.0) } else { 0.0 };
        out.path.s.push(s);
        out.path.x.push(lerp(x[i], x[j], t));
        out.path.y.push(lerp(y[i], y[j], t));
        out.path.psi.push(lerp_angle(psi_in[i], psi_in[j], t));
        out.path.rho.push(lerp(rho_sm[i], rho_sm[j], t));
        // widths follow the original (pre-dedup) sample indexing
        let wj = if i + 1 < track.len() { i + 1 } else { 0 };
        out.w_left.push(lerp(track.w_left[i], track.w_left[wj], t));
        out.w_right.push(lerp(track.w_right[i], track.w_right[wj], t));
    }

    // Corridor degeneracy: a turn tighter than the inner boundary radius
    // folds the corridor onto itself.
    for k in 0..out.path.len() {
        let rho = out.path.rho[k];
        let inner = if rho >= 0.0 { out.w_left[k] } else { out.w_right[k] };
        if rho.abs() * inner >= 1.0 {
            // report the nearest original sample
            let s = out.path.s[k];
            let idx = cum.partition_point(|&c| c <= s).saturating_sub(1);
            return Err(TrackError::DegenerateCorridor { index: idx, rho, half_width: inner });
        }
    }

    Ok(out)
}

// ── G2 connecting spiral ────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum SpiralError {
    #[error("degenerate boundary pair: {0}")]
    InvalidBoundary(&'static str),
    #[error("shooting failed to converge after {iterations} iterations; residuals [{:.3e}, {:.3e}, {:.3e}, {:.3e}]", residuals[0], residuals[1], residuals[2], residuals[3])]
    NonConvergence { residuals: [f64; 4], iterations: u32 },
}

/// Spiral with cubic polynomial curvature
/// `kappa(s) = rho0 + b s + c s^2 + d s^3` over arc length `[0, s_f]`,
/// anchored at a start pose. Curvature is G2-continuous at the start by
/// construction; the end boundary is enforced by the shooting solve.
#[derive(Debug, Clone, Copy)]
pub struct G2Spiral {
    pub start: PoseCurv,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub s_f: f64,
}

// 16-point Gauss-Legendre half table (nodes, weights) on [-1, 1].
const GL16: [(f64, f64); 8] = [
    (0.09501250983763744, 0.18945061045506850),
    (0.28160355077925891, 0.18260341504492359),
    (0.45801677765722739, 0.16915651939500254),
    (0.61787624440264375, 0.14959598881657673),
    (0.75540440835500303, 0.12462897125553387),
    (0.86563120238783174, 0.09515851168249278),
    (0.94457502307323258, 0.06225352393864789),
    (0.98940093499164993, 0.02715245941175409),
];

/// Maximum panel width for the fixed-order quadrature.
const GL_PANEL: f64 = 0.5;

impl G2Spiral {
    pub fn length(&self) -> f64 {
        self.s_f
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.start.rho + s * (self.b + s * (self.c + s * self.d))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.start.psi
            + s * (self.start.rho + s * (self.b / 2.0 + s * (self.c / 3.0 + s * self.d / 4.0)))
    }

    /// Heading argument without wrapping, used inside quadrature.
    fn theta(&self, s: f64) -> f64 {
        self.start.psi
            + s * (self.start.rho + s * (self.b / 2.0 + s * (self.c / 3.0 + s * self.d / 4.0)))
    }

    /// Position by fixed-order Gauss-Legendre quadrature over panels.
    pub fn point_at(&self, s: f64) -> (f64, f64) {
        let (ix, iy) = integrate_trig(|t| self.theta(t), 0.0, s);
        (self.start.x + ix, self.start.y + iy)
    }

    pub fn end_pose(&self) -> PoseCurv {
        let (x, y) = self.point_at(self.s_f);
        PoseCurv::new(x, y, wrap_angle(self.heading_at(self.s_f)), self.curvature_at(self.s_f))
    }

    /// Sample the spiral onto a uniform-grid open path with step <= ds.
    pub fn to_path(&self, ds: f64) -> Path {
        let n = (self.s_f / ds).ceil().max(1.0) as usize;
        let step = self.s_f / n as f64;
        let mut path = Path {
            s: Vec::with_capacity(n + 1),
            x: Vec::with_capacity(n + 1),
            y: Vec::with_capacity(n + 1),
            psi: Vec::with_capacity(n + 1),
            rho: Vec::with_capacity(n + 1),
            closed: false,
            total_len: self.s_f,
        };
        let mut px = self.start.x;
        let mut py = self.start.y;
        for k in 0..=n {
            let s = k as f64 * step;
            if k > 0 {
                let (ix, iy) = integrate_trig(|t| self.theta(t), s - step, s);
                px += ix;
                py += iy;
            }
            path.s.push(s);
            path.x.push(px);
            path.y.push(py);
            path.psi.push(wrap_angle(self.heading_at(s)));
            path.rho.push(self.curvature_at(s));
        }
        path
    }
}

/// Integrate (cos theta, sin theta) over [a, b] with panelled GL16.
fn integrate_trig(theta: impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let len = b - a;
    if len <= 0.0 {
        return (0.0, 0.0);
    }
    let panels = (len / GL_PANEL).ceil().max(1.0) as usize;
    let h = len / panels as f64;
    let mut ix = 0.0;
    let mut iy = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        let half = h / 2.0;
        for &(node, w) in &GL16 {
            for sgn in [-1.0, 1.0] {
                let t = mid + sgn * node * half;
                let th = theta(t);
                ix += w * half * th.cos();
                iy += w * half * th.sin();
            }
        }
    }
    (ix, iy)
}

/// Boundary residuals and Jacobian for the shooting solve, sharing one
/// quadrature pass.
struct ShotEval {
    r: [f64; 4],
    jac: [[f64; 4]; 4],
}

fn eval_shot(start: &PoseCurv, target: &PoseCurv, theta_end: f64, u: &[f64; 4]) -> ShotEval {
    let [b, c, d, sf] = *u;
    let spiral = G2Spiral { start: *start, b, c, d, s_f: sf };

    // moment integrals: Ik_cos = int s^k/k cos(theta), same for sin
    let mut ix = 0.0;
    let mut iy = 0.0;
    let mut m = [[0.0f64; 2]; 3]; // rows: k=2,3,4 -> (cos, sin) moments
    let panels = (sf / GL_PANEL).ceil().max(1.0) as usize;
    let h = sf / panels as f64;
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        let half = h / 2.0;
        for &(node, w) in &GL16 {
            for sgn in [-1.0, 1.0] {
                let t = mid + sgn * node * half;
                let th = spiral.theta(t);
                let (sin, cos) = th.sin_cos();
                let ww = w * half;
                ix += ww * cos;
                iy += ww * sin;
                let t2 = t * t;
                m[0][0] += ww * cos * t2 / 2.0;
                m[0][1] += ww * sin * t2 / 2.0;
                m[1][0] += ww * cos * t2 * t / 3.0;
                m[1][1] += ww * sin * t2 * t / 3.0;
                m[2][0] += ww * cos * t2 * t2 / 4.0;
                m[2][1] += ww * sin * t2 * t2 / 4.0;
            }
        }
    }

    let x_end = start.x + ix;
    let y_end = start.y + iy;
    let th_end = spiral.theta(sf);
    let k_end = spiral.curvature_at(sf);

    let r = [x_end - target.x, y_end - target.y, th_end - theta_end, k_end - target.rho];

    let (sin_e, cos_e) = th_end.sin_cos();
    let sf2 = sf * sf;
    let jac = [
        // dx/d(b,c,d,sf)
        [-m[0][1], -m[1][1], -m[2][1], cos_e],
        // dy
        [m[0][0], m[1][0], m[2][0], sin_e],
        // dtheta
        [sf2 / 2.0, sf2 * sf / 3.0, sf2 * sf2 / 4.0, k_end],
        // dkappa
        [sf, sf2, sf2 * sf, b + 2.0 * c * sf + 3.0 * d * sf2],
    ];
    ShotEval { r, jac }
}

fn solve4(a: &[[f64; 4]; 4], b: &[f64; 4]) -> Option<[f64; 4]> {
    let mut m = *a;
    let mut v = *b;
    for col in 0..4 {
        let mut piv = col;
        for row in col + 1..4 {
            if m[row][col].abs() > m[piv][col].abs() {
                piv = row;
            }
        }
        if m[piv][col].abs() < 1e-14 {
            return None;
        }
        m.swap(col, piv);
        v.swap(col, piv);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
            v[row] -= f * v[col];
        }
    }
    let mut x = [0.0; 4];
    for col in (0..4).rev() {
        let mut acc = v[col];
        for k in col + 1..4 {
            acc -= m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    Some(x)
}

const SPIRAL_TOL: f64 = 1e-6;
const SPIRAL_MAX_ITER: u32 = 50;

fn residual_norm(r: &[f64; 4]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Solve for the cubic-curvature spiral connecting `start` to `end` with
/// continuous position, heading, and curvature at both ends.
///
/// Damped Newton shooting over (b, c, d, s_f): straight-chord length and a
/// linear curvature ramp as the initial guess, step halving on residual
/// increase, 50-iteration cap. Converged when every boundary residual is
/// within 1e-6 (m / rad / 1/m).
pub fn fit_g2_spiral(start: PoseCurv, end: PoseCurv) -> Result<G2Spiral, SpiralError> {
    let chord = (end.x - start.x).hypot(end.y - start.y);
    if chord < 1e-9 {
        return Err(SpiralError::InvalidBoundary("coincident endpoints"));
    }
    if !(start.rho.is_finite() && end.rho.is_finite()) {
        return Err(SpiralError::InvalidBoundary("non-finite curvature"));
    }
    // nearest-branch heading target; |turn| >= pi is out of contract
    let dpsi = wrap_angle(end.psi - start.psi);
    let theta_end = start.psi + dpsi;

    // arc-over-chord stretch for a circular arc subtending dpsi
    let s_base = chord * (1.0 + dpsi * dpsi / 10.0);
    let mut last = SpiralError::NonConvergence { residuals: [f64::INFINITY; 4], iterations: 0 };
    for scale in [1.0, 1.6, 0.7] {
        match newton_shoot(&start, &end, theta_end, chord, s_base * scale) {
            Ok(sp) => return Ok(sp),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn newton_shoot(
    start: &PoseCurv,
    end: &PoseCurv,
    theta_end: f64,
    chord: f64,
    s_init: f64,
) -> Result<G2Spiral, SpiralError> {
    let mut u = [(end.rho - start.rho) / s_init, 0.0, 0.0, s_init];
    let mut eval = eval_shot(start, end, theta_end, &u);
    let mut norm = residual_norm(&eval.r);

    for iter in 0..SPIRAL_MAX_ITER {
        if eval.r.iter().all(|v| v.abs() <= SPIRAL_TOL) {
            let [b, c, d, s_f] = u;
            return Ok(G2Spiral { start: *start, b, c, d, s_f });
        }
        let neg_r = [-eval.r[0], -eval.r[1], -eval.r[2], -eval.r[3]];
        let Some(step) = solve4(&eval.jac, &neg_r) else {
            return Err(SpiralError::NonConvergence { residuals: eval.r, iterations: iter });
        };
        let mut alpha = 1.0f64;
        loop {
            let mut cand = [
                u[0] + alpha * step[0],
                u[1] + alpha * step[1],
                u[2] + alpha * step[2],
                u[3] + alpha * step[3],
            ];
            // keep the free length positive and bounded
            cand[3] = cand[3].clamp(0.05 * chord, 40.0 * chord);
            let cand_eval = eval_shot(start, end, theta_end, &cand);
            let cand_norm = residual_norm(&cand_eval.r);
            if cand_norm < norm || alpha < 1.0 / 1024.0 {
                u = cand;
                eval = cand_eval;
                norm = cand_norm;
                break;
            }
            alpha /= 2.0;
        }
    }
    if eval.r.iter().all(|v| v.abs() <= SPIRAL_TOL) {
        let [b, c, d, s_f] = u;
        return Ok(G2Spiral { start: *start, b, c, d, s_f });
    }
    Err(SpiralError::NonConvergence { residuals: eval.r, iterations: SPIRAL_MAX_ITER })
}

/// Uniform curvature samples over `[0, horizon]`; past the spiral end the
/// curvature is held at its final value (the control module appends
/// reference-path curvature instead when it has one).
pub fn spiral_curvature_profile(spiral: &G2Spiral, horizon: f64, ds: f64) -> Vec<f64> {
    let n = (horizon / ds + 1e-9).floor().max(0.0) as usize;
    (0..=n)
        .map(|k| {
            let s = k as f64 * ds;
            spiral.curvature_at(s.min(spiral.s_f))
        })
        .collect()
}
