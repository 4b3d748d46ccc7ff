//! Offline raceline generation: a minimum-curvature path inside the track
//! corridor, then a periodic speed/acceleration profile over it.
//!
//! The path step solves a box-constrained quadratic program: lateral
//! offsets n along the centerline's left normals minimize the sum of
//! squared offset-path curvatures, linearized as kappa + n'' + kappa^2 n,
//! subject to |n| staying `margin` clear of the corridor edge. The speed
//! step iterates the finite-horizon planner to a periodic fixed point.

use crate::geometry::{resample_corridor, resample_track, Corridor, Path, TrackDefinition, TrackError};
use crate::ggv::GgvDiagram;
use crate::velocity::{plan_speed, VelocityError};
use thiserror::Error;

/// Vehicle footprint radius used for crash checks.
pub const VEHICLE_HALF_WIDTH: f64 = 0.15;
/// Corridor margin for raceline planning: footprint radius plus tracking
/// slack, so a line clipped at the bound still leaves room for controller
/// error before the footprint exits the corridor. The slack portion (0.2)
/// covers the tracker's steady cornering cut at envelope-edge speeds.
pub const PLANNING_MARGIN: f64 = 0.35;
/// Grid for the offset QP; coarse keeps the bending operator conditioned.
pub const QP_GRID_STEP: f64 = 0.25;
/// Grid for generated racelines and speed profiles.
pub const PROFILE_GRID_STEP: f64 = 0.05;

const CYCLIC_TOL: f64 = 1e-4;
const CYCLIC_MAX_SWEEPS: usize = 20;

#[derive(Debug, Error)]
pub enum RacelineError {
    #[error("margin {margin} leaves no corridor at s={s:.3} (sample {index})")]
    InfeasibleMargin { margin: f64, s: f64, index: usize },
    #[error("speed profile not periodic after {CYCLIC_MAX_SWEEPS} sweeps (last delta {0} m/s)")]
    CyclicDivergence(f64),
    #[error("raceline profiling needs a closed path")]
    NotClosed,
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Speed(#[from] VelocityError),
    #[error("raceline file parse: line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("raceline file io: {0}")]
    Io(#[from] std::io::Error),
}

// ── minimum-curvature offsets ───────────────────────────────────────────

struct OffsetQp<'a> {
    rho: &'a [f64],
    h: f64,
    closed: bool,
}

impl OffsetQp<'_> {
    /// A n = n'' + rho^2 n; open paths carry no bending term at the two
    /// endpoint rows (their curvature is centerline-fixed anyway).
    fn apply(&self, n: &[f64], out: &mut [f64]) {
        let m = n.len();
        let h2 = self.h * self.h;
        for i in 0..m {
            let bend = if self.closed {
                (n[(i + m - 1) % m] - 2.0 * n[i] + n[(i + 1) % m]) / h2
            } else if i > 0 && i + 1 < m {
                (n[i - 1] - 2.0 * n[i] + n[i + 1]) / h2
            } else {
                0.0
            };
            out[i] = bend + self.rho[i] * self.rho[i] * n[i];
        }
    }

    /// A^T r, matching `apply`'s row convention.
    fn apply_t(&self, r: &[f64], out: &mut [f64]) {
        let m = r.len();
        let h2 = self.h * self.h;
        for o in out.iter_mut() {
            *o = 0.0;
        }
        for i in 0..m {
            out[i] += self.rho[i] * self.rho[i] * r[i];
            let bends = if self.closed {
                true
            } else {
                i > 0 && i + 1 < m
            };
            if bends {
                let prev = (i + m - 1) % m;
                let next = (i + 1) % m;
                out[prev] += r[i] / h2;
                out[i] += -2.0 * r[i] / h2;
                out[next] += r[i] / h2;
            }
        }
    }
}

fn offset_bounds(
    corridor: &Corridor,
    margin: f64,
) -> Result<(Vec<f64>, Vec<f64>), RacelineError> {
    let m = corridor.path.len();
    let mut lb = vec![0.0; m];
    let mut ub = vec![0.0; m];
    for i in 0..m {
        if margin >= corridor.w_left[i] || margin >= corridor.w_right[i] {
            return Err(RacelineError::InfeasibleMargin {
                margin,
                s: corridor.path.s[i],
                index: i,
            });
        }
        ub[i] = corridor.w_left[i] - margin;
        lb[i] = -(corridor.w_right[i] - margin);
    }
    Ok((lb, ub))
}

/// Integral-form objective for an offset vector on the corridor grid.
pub fn curvature_objective(corridor: &Corridor, offsets: &[f64]) -> f64 {
    let m = corridor.path.len();
    assert_eq!(offsets.len(), m);
    let h = corridor.path.s[1] - corridor.path.s[0];
    let qp = OffsetQp { rho: &corridor.path.rho, h, closed: corridor.path.closed };
    let mut an = vec![0.0; m];
    qp.apply(offsets, &mut an);
    (0..m).map(|i| (corridor.path.rho[i] + an[i]).powi(2)).sum::<f64>() * h
}

/// Minimize the linearized offset-path curvature over the corridor grid by
/// projected gradient descent with a fixed 1/L step. The quartic bending
/// spectrum makes this slow but sure; the coarse grid keeps L small.
pub fn min_curvature_offsets(
    corridor: &Corridor,
    margin: f64,
) -> Result<Vec<f64>, RacelineError> {
    let m = corridor.path.len();
    let (lb, ub) = offset_bounds(corridor, margin)?;
    let h = corridor.path.s[1] - corridor.path.s[0];
    let qp = OffsetQp { rho: &corridor.path.rho, h, closed: corridor.path.closed };

    let rho_max2 = corridor.path.rho.iter().fold(0.0f64, |a, &r| a.max(r * r));
    // ||A||_2 <= 4/h^2 + max rho^2 (diagonally dominant bound)
    let lip = 2.0 * (4.0 / (h * h) + rho_max2).powi(2);
    let alpha = 1.0 / lip;

    let mut n = vec![0.0; m];
    let mut an = vec![0.0; m];
    let mut r = vec![0.0; m];
    let mut g = vec![0.0; m];
    for _ in 0..600_000 {
        qp.apply(&n, &mut an);
        for i in 0..m {
            r[i] = corridor.path.rho[i] + an[i];
        }
        qp.apply_t(&r, &mut g);
        let mut moved = 0.0f64;
        for i in 0..m {
            let next = (n[i] - alpha * 2.0 * g[i]).clamp(lb[i], ub[i]);
            moved = moved.max((next - n[i]).abs());
            n[i] = next;
        }
        if moved < 1e-13 {
            break;
        }
    }
    Ok(n)
}

// ── offset interpolation ────────────────────────────────────────────────

/// Cubic spline over uniformly spaced offsets; periodic for closed paths,
/// natural otherwise. C2 interpolation keeps the resampled curvature of
/// the offset path free of knot kinks.
struct OffsetSpline {
    n: Vec<f64>,
    m2: Vec<f64>,
    h: f64,
    closed: bool,
    total: f64,
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

impl OffsetSpline {
    fn fit(offsets: &[f64], h: f64, closed: bool, total: f64) -> Self {
        let m = offsets.len();
        let mut a = vec![vec![0.0; m]; m];
        let mut b = vec![0.0; m];
        if closed {
            for i in 0..m {
                let prev = (i + m - 1) % m;
                let next = (i + 1) % m;
                a[i][prev] += 1.0;
                a[i][i] += 4.0;
                a[i][next] += 1.0;
                b[i] = 6.0 * (offsets[prev] - 2.0 * offsets[i] + offsets[next]) / (h * h);
            }
        } else {
            a[0][0] = 1.0;
            a[m - 1][m - 1] = 1.0;
            for i in 1..m - 1 {
                a[i][i - 1] = 1.0;
                a[i][i] = 4.0;
                a[i][i + 1] = 1.0;
                b[i] = 6.0 * (offsets[i - 1] - 2.0 * offsets[i] + offsets[i + 1]) / (h * h);
            }
        }
        let m2 = solve_dense(a, b).expect("spline system is diagonally dominant");
        Self { n: offsets.to_vec(), m2, h, closed, total }
    }

    fn eval(&self, s: f64) -> f64 {
        let m = self.n.len();
        let s = if self.closed { s.rem_euclid(self.total) } else { s.clamp(0.0, self.total) };
        let mut i = (s / self.h).floor() as usize;
        let last = if self.closed { m - 1 } else { m - 2 };
        i = i.min(last);
        let j = if self.closed { (i + 1) % m } else { i + 1 };
        let tau = (s - i as f64 * self.h) / self.h;
        let (ni, nj, mi, mj) = (self.n[i], self.n[j], self.m2[i], self.m2[j]);
        let h2 = self.h * self.h;
        ni * (1.0 - tau)
            + nj * tau
            + h2 / 6.0
                * (((1.0 - tau).powi(3) - (1.0 - tau)) * mi + (tau.powi(3) - tau) * mj)
    }
}

/// Minimum-curvature path through the track corridor, `margin` clear of
/// the walls, resampled to the profile grid.
pub fn min_curvature_path(track: &TrackDefinition, margin: f64) -> Result<Path, RacelineError> {
    let coarse = resample_corridor(track, QP_GRID_STEP)?;
    let offsets = min_curvature_offsets(&coarse, margin)?;
    let h = coarse.path.s[1] - coarse.path.s[0];
    let spline = OffsetSpline::fit(&offsets, h, coarse.path.closed, coarse.path.total_len);

    let fine = resample_corridor(track, PROFILE_GRID_STEP)?;
    let m = fine.path.len();
    let mut x = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    for i in 0..m {
        // spline overshoot between knots is clipped against the local bound
        let lo = -(fine.w_right[i] - margin);
        let hi = fine.w_left[i] - margin;
        let n = spline.eval(fine.path.s[i]).clamp(lo, hi);
        x.push(fine.path.x[i] - n * fine.path.psi[i].sin());
        y.push(fine.path.y[i] + n * fine.path.psi[i].cos());
    }
    let w = vec![1.0; m];
    let offset_track = TrackDefinition::new(x, y, w.clone(), w, track.closed)?;
    Ok(resample_track(&offset_track, PROFILE_GRID_STEP)?)
}

// ── periodic speed profile ──────────────────────────────────────────────

/// Closed-track reference trajectory: path plus speed and acceleration
/// profiles on the path grid. `ax[i]` spans [s[i], s[i+1]] (the last entry
/// wraps to s=0), so the implied arrival speed at the wrap,
/// sqrt(v[n-1]^2 + 2 ax[n-1] ds), closes the lap onto v[0].
#[derive(Debug, Clone, PartialEq)]
pub struct Raceline {
    pub path: Path,
    pub v: Vec<f64>,
    pub ax: Vec<f64>,
    pub ay: Vec<f64>,
}

impl Raceline {
    pub fn grid_step(&self) -> f64 {
        self.path.s[1] - self.path.s[0]
    }

    /// Speed carried across the lap seam by the stored profile.
    pub fn wrap_speed(&self) -> f64 {
        let n = self.v.len();
        let ds = self.grid_step();
        (self.v[n - 1] * self.v[n - 1] + 2.0 * self.ax[n - 1] * ds).max(0.0).sqrt()
    }

    pub fn lap_time(&self) -> f64 {
        let n = self.v.len();
        let ds = self.grid_step();
        let mut t = 0.0;
        for i in 0..n {
            let w = if i + 1 < n { self.v[i + 1] } else { self.wrap_speed() };
            t += 2.0 * ds / (self.v[i] + w);
        }
        t
    }
}

/// Periodic speed profile over a closed path: the finite-horizon planner
/// runs over two laps plus the wrap sample, seeded with the previous
/// sweep's seam speed as both start speed and terminal cap; the middle
/// lap is transient-free once the seam speed stops moving.
pub fn profile_raceline(path: &Path, ggv: &GgvDiagram) -> Result<Raceline, RacelineError> {
    if !path.closed {
        return Err(RacelineError::NotClosed);
    }
    let n = path.len();
    let ds = path.s[1] - path.s[0];

    let mut rho2 = Vec::with_capacity(2 * n + 1);
    rho2.extend_from_slice(&path.rho);
    rho2.extend_from_slice(&path.rho);
    rho2.push(path.rho[0]);

    let mut v0 = path
        .rho
        .iter()
        .map(|r| ggv.max_cornering_speed(*r))
        .fold(f64::INFINITY, f64::min);
    let mut prev: Option<Vec<f64>> = None;
    let mut last_delta = f64::INFINITY;
    for _ in 0..CYCLIC_MAX_SWEEPS {
        let plan = plan_speed(&rho2, ds, v0, ggv, v0)?;
        let window = plan.v[n..=2 * n].to_vec();
        if let Some(p) = &prev {
            last_delta = window
                .iter()
                .zip(p.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if last_delta < CYCLIC_TOL {
                let v: Vec<f64> = window[..n].to_vec();
                let mut ax = vec![0.0; n];
                for i in 0..n {
                    ax[i] = (window[i + 1] * window[i + 1] - v[i] * v[i]) / (2.0 * ds);
                }
                let ay: Vec<f64> = (0..n).map(|i| v[i] * v[i] * path.rho[i]).collect();
                return Ok(Raceline { path: path.clone(), v, ax, ay });
            }
        }
        v0 = plan.v[n];
        prev = Some(window);
    }
    Err(RacelineError::CyclicDivergence(last_delta))
}

// ── raceline files ──────────────────────────────────────────────────────

impl Raceline {
    /// Delimited table `s,x,y,psi,rho,v,ax,ay`. Values are printed with
    /// the shortest representation that parses back to the identical bits,
    /// so a write/read cycle is lossless.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# closed={}\n", self.path.closed));
        out.push_str(&format!("# total_len={}\n", self.path.total_len));
        out.push_str("s,x,y,psi,rho,v,ax,ay\n");
        for i in 0..self.v.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.path.s[i],
                self.path.x[i],
                self.path.y[i],
                self.path.psi[i],
                self.path.rho[i],
                self.v[i],
                self.ax[i],
                self.ay[i],
            ));
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self, RacelineError> {
        let mut closed = false;
        let mut total_len: Option<f64> = None;
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 8];
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("closed=") {
                    closed = v == "true";
                } else if let Some(v) = rest.strip_prefix("total_len=") {
                    total_len = Some(v.parse().map_err(|_| RacelineError::Parse {
                        line: lineno + 1,
                        reason: format!("bad total_len {v:?}"),
                    })?);
                }
                continue;
            }
            if !saw_header {
                if line != "s,x,y,psi,rho,v,ax,ay" {
                    return Err(RacelineError::Parse {
                        line: lineno + 1,
                        reason: format!("unexpected header {line:?}"),
                    });
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(RacelineError::Parse {
                    line: lineno + 1,
                    reason: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            for (c, f) in cols.iter_mut().zip(fields.iter()) {
                c.push(f.trim().parse().map_err(|_| RacelineError::Parse {
                    line: lineno + 1,
                    reason: format!("bad number {f:?}"),
                })?);
            }
        }
        let n = cols[0].len();
        if n < 2 {
            return Err(RacelineError::Parse { line: 0, reason: "needs at least 2 rows".into() });
        }
        let total_len = total_len.ok_or(RacelineError::Parse {
            line: 0,
            reason: "missing total_len header".into(),
        })?;
        let mut it = cols.into_iter();
        let (s, x, y, psi, rho, v, ax, ay) = (
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        );
        let path = Path { s, x, y, psi, rho, closed, total_len };
        Ok(Raceline { path, v, ax, ay })
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self, RacelineError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), RacelineError> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}
