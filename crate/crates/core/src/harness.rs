//! Experiment harness: run metrics, the ablation grid, the acceleration
//! envelope expansion search, and steering-dataset extraction from traces.

use crate::control::ControllerKind;
use crate::geometry::{resample_corridor, Path, TrackDefinition};
use crate::ggv::GgvDiagram;
use crate::msnn::{MsnnError, MsnnModel, ReferenceWindow, SplitTag, SteerDataset, SteerSample};
use crate::raceline::{profile_raceline, Raceline, RacelineError};
use crate::sim::{run_closed_loop, PlantConfig, RunTrace, SimError, StackConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("empty trace")]
    EmptyTrace,
    #[error("trace ends in a crash; not usable here")]
    CrashTrace,
    #[error("trace too short: {have} ticks, need {need}")]
    TooShort { have: usize, need: usize },
    #[error("dataset split leaves an empty side")]
    EmptySplit,
    #[error("base envelope is not closed-loop feasible: {0}")]
    BaseInfeasible(String),
    #[error("grid requests the steering network but no model was given")]
    MissingModel,
    #[error("bad parameter: {0}")]
    BadParam(&'static str),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Raceline(#[from] RacelineError),
    #[error(transparent)]
    Track(#[from] crate::geometry::TrackError),
    #[error(transparent)]
    Msnn(#[from] MsnnError),
}

// ── metrics ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpuStats {
    pub mean_us: f64,
    pub max_us: f64,
}

fn cpu_stats(xs: &[f64]) -> CpuStats {
    if xs.is_empty() {
        return CpuStats { mean_us: 0.0, max_us: 0.0 };
    }
    CpuStats {
        mean_us: xs.iter().sum::<f64>() / xs.len() as f64,
        max_us: xs.iter().fold(0.0f64, |a, &b| a.max(b)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// Mean time per completed lap; absent on crash or when no lap closed.
    pub lap_time: Option<f64>,
    pub lap_times: Vec<f64>,
    pub mean_lat_err: f64,
    pub max_lat_err: f64,
    pub rms_steering_rate: f64,
    pub max_v: f64,
    pub max_ax: f64,
    pub max_ay: f64,
    pub crash: bool,
    /// No completed lap and no crash either (run cut short).
    pub partial: bool,
    pub cpu_controller: CpuStats,
    pub cpu_planner: CpuStats,
    pub cpu_msnn: CpuStats,
}

/// Aggregate a closed-loop trace against the raceline it was tracking.
/// Lateral error is recomputed by projecting each logged position onto
/// the raceline path; lap boundaries come from s_proj wrap events.
pub fn compute_metrics(trace: &RunTrace, raceline: &Raceline) -> Result<RunMetrics, HarnessError> {
    if trace.rows.is_empty() {
        return Err(HarnessError::EmptyTrace);
    }
    let path = &raceline.path;
    let total = path.total_len;
    let dt = 1.0 / trace.tick_rate;

    let mut sum_lat = 0.0;
    let mut max_lat = 0.0f64;
    let mut max_v = 0.0f64;
    let mut max_ay = 0.0f64;
    for r in &trace.rows {
        let e = path.project(r.x, r.y).lateral_error.abs();
        sum_lat += e;
        max_lat = max_lat.max(e);
        max_v = max_v.max(r.vx);
        max_ay = max_ay.max((r.vx * r.r).abs());
    }

    let mut sq_rate = 0.0;
    let mut max_ax = 0.0f64;
    for w in trace.rows.windows(2) {
        let rate = (w[1].delta_cmd - w[0].delta_cmd) / dt;
        sq_rate += rate * rate;
        max_ax = max_ax.max(((w[1].vx - w[0].vx) / dt).abs());
    }
    let rms_steering_rate = if trace.rows.len() > 1 {
        (sq_rate / (trace.rows.len() - 1) as f64).sqrt()
    } else {
        0.0
    };

    // lap boundaries from wrap events in the projection stream
    let mut lap_times = Vec::new();
    let mut lap_start = trace.rows[0].t;
    let mut prev_s = trace.rows[0].s_proj;
    for r in &trace.rows[1..] {
        if prev_s > 0.7 * total && r.s_proj < 0.3 * total {
            lap_times.push(r.t - lap_start);
            lap_start = r.t;
        }
        prev_s = r.s_proj;
    }

    let crash = trace.crash.is_some();
    if crash {
        lap_times.clear();
    }
    let lap_time = if crash || lap_times.is_empty() {
        None
    } else {
        Some(lap_times.iter().sum::<f64>() / lap_times.len() as f64)
    };
    Ok(RunMetrics {
        lap_time,
        partial: !crash && lap_times.is_empty(),
        lap_times,
        mean_lat_err: sum_lat / trace.rows.len() as f64,
        max_lat_err: max_lat,
        rms_steering_rate,
        max_v,
        max_ax,
        max_ay,
        crash,
        cpu_controller: cpu_stats(&trace.cpu_us_controller),
        cpu_planner: cpu_stats(&trace.cpu_us_planner),
        cpu_msnn: cpu_stats(&trace.cpu_us_msnn),
    })
}

// ── ablation grid ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GgvPreset {
    pub name: String,
    pub ggv: GgvDiagram,
}

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub controllers: Vec<ControllerKind>,
    pub msnn: Vec<bool>,
    pub replan: Vec<bool>,
    pub presets: Vec<GgvPreset>,
}

#[derive(Debug, Clone)]
pub struct CellDesc {
    pub controller: ControllerKind,
    pub msnn: bool,
    pub replan: bool,
    pub preset: String,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub cell: CellDesc,
    pub metrics: RunMetrics,
}

#[derive(Debug)]
pub struct AblationReport {
    pub outcomes: Vec<AblationOutcome>,
    pub traces: Vec<RunTrace>,
}

fn controller_tag(c: ControllerKind) -> &'static str {
    match c {
        ControllerKind::PurePursuit => "pp",
        ControllerKind::Clothoid => "cl",
    }
}

impl AblationReport {
    /// Delimited summary, one row per grid cell in fixed grid order.
    /// Wall-clock CPU stats are intentionally excluded so the bytes are
    /// reproducible for identical configs and seeds.
    pub fn summary_table(&self) -> String {
        let mut out = String::from(
            "controller,msnn,replan,preset,laps_completed,lap_time_s,mean_lat_err_m,max_lat_err_m,rms_steer_rate_rad_per_s,max_v_m_per_s,max_ax_m_per_s2,max_ay_m_per_s2,crash\n",
        );
        for o in &self.outcomes {
            let m = &o.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                controller_tag(o.cell.controller),
                o.cell.msnn,
                o.cell.replan,
                o.cell.preset,
                m.lap_times.len(),
                m.lap_time.map(|t| format!("{t}")).unwrap_or_default(),
                m.mean_lat_err,
                m.max_lat_err,
                m.rms_steering_rate,
                m.max_v,
                m.max_ax,
                m.max_ay,
                m.crash,
            ));
        }
        out
    }
}

/// Run every cell of the grid: controllers x msnn on/off x replan on/off
/// x envelope presets. Cells run on up to `jobs` worker threads; results
/// assemble in grid order. A crash in one cell is an outcome, not an
/// error.
pub fn run_ablation(
    track: &TrackDefinition,
    race_path: &Path,
    model: Option<&MsnnModel>,
    grid: &AblationGrid,
    plant: &PlantConfig,
    laps: usize,
    seed: u64,
    jobs: usize,
) -> Result<AblationReport, HarnessError> {
    if grid.controllers.is_empty()
        || grid.msnn.is_empty()
        || grid.replan.is_empty()
        || grid.presets.is_empty()
    {
        return Err(HarnessError::BadParam("empty grid axis"));
    }
    if grid.msnn.contains(&true) && model.is_none() {
        return Err(HarnessError::MissingModel);
    }

    // racelines depend only on the preset; profile each once
    let mut racelines = Vec::new();
    for p in &grid.presets {
        racelines.push(profile_raceline(race_path, &p.ggv)?);
    }

    struct Cell {
        desc: CellDesc,
        preset_idx: usize,
    }
    let mut cells = Vec::new();
    for c in &grid.controllers {
        for &m in &grid.msnn {
            for &r in &grid.replan {
                for (pi, p) in grid.presets.iter().enumerate() {
                    cells.push(Cell {
                        desc: CellDesc {
                            controller: *c,
                            msnn: m,
                            replan: r,
                            preset: p.name.clone(),
                        },
                        preset_idx: pi,
                    });
                }
            }
        }
    }

    let jobs = jobs.max(1).min(cells.len());
    let mut slots: Vec<Option<(RunTrace, RunMetrics)>> = Vec::new();
    slots.resize_with(cells.len(), || None);

    let run_cell = |cell: &Cell| -> Result<(RunTrace, RunMetrics), HarnessError> {
        let preset = &grid.presets[cell.preset_idx];
        let raceline = &racelines[cell.preset_idx];
        let mut stack = StackConfig::new(cell.desc.controller, preset.ggv.clone());
        stack.online_replan = cell.desc.replan;
        if cell.desc.msnn {
            stack.msnn = Some(model.unwrap().clone());
        }
        let trace = run_closed_loop(raceline, track, &stack, plant, laps, seed)?;
        let metrics = compute_metrics(&trace, raceline)?;
        Ok((trace, metrics))
    };

    if jobs == 1 {
        for (i, c) in cells.iter().enumerate() {
            slots[i] = Some(run_cell(c)?);
        }
    } else {
        let errs = std::sync::Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for (w, chunk) in slots.chunks_mut(cells.len().div_ceil(jobs)).enumerate() {
                let cells = &cells;
                let run_cell = &run_cell;
                let errs = &errs;
                let base = w * cells.len().div_ceil(jobs);
                scope.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        match run_cell(&cells[base + k]) {
                            Ok(pair) => *slot = Some(pair),
                            Err(e) => errs.lock().unwrap().push(e),
                        }
                    }
                });
            }
        });
        if let Some(e) = errs.into_inner().unwrap().into_iter().next() {
            return Err(e);
        }
    }

    let mut outcomes = Vec::new();
    let mut traces = Vec::new();
    for (cell, slot) in cells.into_iter().zip(slots) {
        let (trace, metrics) = slot.expect("every cell ran");
        outcomes.push(AblationOutcome { cell: cell.desc, metrics });
        traces.push(trace);
    }
    Ok(AblationReport { outcomes, traces })
}

// ── envelope expansion search ───────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct FeasibilityBounds {
    /// Max |lateral error| allowed, as a fraction of the narrowest
    /// corridor half-width.
    pub lat_frac_of_half_width: f64,
    /// Max |commanded - actual| speed allowed, m/s.
    pub max_speed_err: f64,
}

impl Default for FeasibilityBounds {
    fn default() -> Self {
        Self { lat_frac_of_half_width: 0.5, max_speed_err: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct ExpansionStep {
    pub factor: f64,
    pub feasible: bool,
    pub reason: String,
}

/// Grow the acceleration limits of `base` multiplicatively by (1+step)
/// per iteration, re-profiling the raceline and re-running the closed
/// loop each time, until the loop goes infeasible (crash, excessive
/// lateral error, or excessive speed-tracking error). Returns the last
/// feasible envelope and the search log. The stack template's ggv field
/// is replaced per candidate.
pub fn expand_ggv(
    base: &GgvDiagram,
    track: &TrackDefinition,
    race_path: &Path,
    stack_template: &StackConfig,
    plant: &PlantConfig,
    step: f64,
    bounds: FeasibilityBounds,
    laps: usize,
    seed: u64,
    max_steps: usize,
) -> Result<(GgvDiagram, Vec<ExpansionStep>), HarnessError> {
    if !(step > 0.0) {
        return Err(HarnessError::BadParam("expansion step must be positive"));
    }
    let corridor = resample_corridor(track, 0.05)?;
    let lat_limit = bounds.lat_frac_of_half_width * corridor.min_half_width();

    let assess = |ggv: &GgvDiagram| -> (bool, String) {
        let raceline = match profile_raceline(race_path, ggv) {
            Ok(r) => r,
            Err(e) => return (false, format!("raceline profiling failed: {e}")),
        };
        let mut stack = stack_template.clone();
        stack.ggv = ggv.clone();
        let trace = match run_closed_loop(&raceline, track, &stack, plant, laps, seed) {
            Ok(t) => t,
            Err(e) => return (false, format!("run failed: {e}")),
        };
        if trace.crash.is_some() {
            return (false, "crash".into());
        }
        if trace.laps_completed < laps {
            return (false, "incomplete".into());
        }
        let metrics = match compute_metrics(&trace, &raceline) {
            Ok(m) => m,
            Err(e) => return (false, format!("metrics failed: {e}")),
        };
        if metrics.max_lat_err > lat_limit {
            return (false, format!("lateral error {:.3} > {:.3}", metrics.max_lat_err, lat_limit));
        }
        let speed_err = trace
            .rows
            .iter()
            .map(|r| (r.v_cmd - r.vx).abs())
            .fold(0.0f64, f64::max);
        if speed_err > bounds.max_speed_err {
            return (false, format!("speed error {:.3} > {:.3}", speed_err, bounds.max_speed_err));
        }
        (true, "ok".into())
    };

    let (base_ok, why) = assess(base);
    if !base_ok {
        return Err(HarnessError::BaseInfeasible(why));
    }

    let mut log = vec![ExpansionStep { factor: 1.0, feasible: true, reason: "ok".into() }];
    let mut best = base.clone();
    for k in 1..=max_steps {
        let factor = (1.0 + step).powi(k as i32);
        let cand = base.scaled(factor);
        let (ok, reason) = assess(&cand);
        log.push(ExpansionStep { factor, feasible: ok, reason });
        if !ok {
            break;
        }
        best = cand;
    }
    Ok((best, log))
}

// ── dataset extraction ──────────────────────────────────────────────────

/// Linear interpolation of a per-tick stream at continuous time t.
fn interp_stream(values: &[f64], t0: f64, dt: f64, t: f64) -> f64 {
    let f = ((t - t0) / dt).clamp(0.0, (values.len() - 1) as f64);
    let i = (f.floor() as usize).min(values.len() - 1);
    let j = (i + 1).min(values.len() - 1);
    values[i] + (values[j] - values[i]) * (f - i as f64)
}

/// Cut sliding windows out of a logged run and pair each with the
/// steering command issued at the window start. Channels come from the
/// realized motion: curvature as yaw rate over speed, speed directly,
/// lateral acceleration as v²ρ, longitudinal as the speed derivative.
/// Commands cause the realized curvature one actuation latency later, so
/// fitting the command against these windows recovers that latency as
/// the peak of the learned filters; planned references would make the
/// target a function of the window's own first sample and teach nothing.
/// Windows sample the streams at period `t_s` (linear interpolation
/// between ticks); starts advance by `stride_ticks`. The split is
/// chronological: the first `train_frac` of windows train, the rest
/// validate.
pub fn extract_dataset(
    trace: &RunTrace,
    w: usize,
    t_s: f64,
    train_frac: f64,
    stride_ticks: usize,
) -> Result<(SteerDataset, SteerDataset), HarnessError> {
    if trace.crash.is_some() {
        return Err(HarnessError::CrashTrace);
    }
    if !(t_s > 0.0) || stride_ticks == 0 || !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(HarnessError::BadParam("bad window parameters"));
    }
    let n = trace.rows.len();
    let span_ticks = (w as f64 * t_s * trace.tick_rate).ceil() as usize;
    if n < span_ticks + 1 {
        return Err(HarnessError::TooShort { have: n, need: span_ticks + 1 });
    }
    let dt = 1.0 / trace.tick_rate;
    let t0 = trace.rows[0].t;

    let rho: Vec<f64> = trace
        .rows
        .iter()
        .map(|r| r.r / r.vx.max(crate::sim::V_SLIP_FLOOR))
        .collect();
    let v: Vec<f64> = trace.rows.iter().map(|r| r.vx).collect();
    // speed slope by central differences, one-sided at the ends
    let mut ax = vec![0.0; n];
    for i in 0..n {
        let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
        ax[i] = (v[b] - v[a]) / ((b - a) as f64 * dt);
    }

    // a window is valid when every sample lands inside one contiguous
    // time stretch (no tick gaps)
    let contiguous_until = {
        let mut bound = vec![n - 1; n];
        for i in (0..n - 1).rev() {
            let gap = trace.rows[i + 1].t - trace.rows[i].t;
            bound[i] = if gap > 1.5 * dt { i } else { bound[i + 1] };
        }
        bound
    };

    let mut samples = Vec::new();
    let mut k = 0;
    while k + span_ticks < n {
        if contiguous_until[k] >= k + span_ticks {
            let t_start = trace.rows[k].t;
            let mut win = ReferenceWindow {
                rho: Vec::with_capacity(w + 1),
                v: Vec::with_capacity(w + 1),
                ay: Vec::with_capacity(w + 1),
                ax: Vec::with_capacity(w + 1),
            };
            for j in 0..=w {
                let t = t_start + j as f64 * t_s;
                let rj = interp_stream(&rho, t0, dt, t);
                let vj = interp_stream(&v, t0, dt, t);
                win.rho.push(rj);
                win.v.push(vj);
                win.ay.push(vj * vj * rj);
                win.ax.push(interp_stream(&ax, t0, dt, t));
            }
            samples.push(SteerSample { window: win, delta: trace.rows[k].delta_cmd });
        }
        k += stride_ticks;
    }
    if samples.len() < 2 {
        return Err(HarnessError::TooShort { have: samples.len(), need: 2 });
    }

    let n_train = ((samples.len() as f64) * train_frac).floor() as usize;
    if n_train == 0 || n_train >= samples.len() {
        return Err(HarnessError::EmptySplit);
    }
    let val = samples.split_off(n_train);
    let train = SteerDataset { samples, t_s, split: SplitTag::Train };
    let val = SteerDataset { samples: val, t_s, split: SplitTag::Validation };
    train.validate()?;
    val.validate()?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{cautious_ggv, oval_track};
    use crate::raceline::{min_curvature_path, PLANNING_MARGIN};
    use crate::sim::TraceRow;

    fn oval_setup() -> (TrackDefinition, Path, Raceline) {
        let track = oval_track();
        let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
        let line = profile_raceline(&path, &cautious_ggv()).unwrap();
        (track, path, line)
    }

    /// Trace glued to the raceline at constant speed with a chosen
    /// steering stream.
    fn glued_trace(line: &Raceline, total_t: f64, tick_rate: f64, delta: impl Fn(f64) -> f64) -> RunTrace {
        let dt = 1.0 / tick_rate;
        let v = 2.0;
        let n = (total_t / dt).round() as usize;
        let mut rows = Vec::with_capacity(n);
        for k in 0..n {
            let t = k as f64 * dt;
            let s = (v * t).rem_euclid(line.path.total_len);
            let p = line.path.sample(s);
            rows.push(TraceRow {
                t,
                x: p.x,
                y: p.y,
                psi: p.psi,
                vx: v,
                vy: 0.0,
                r: v * p.rho,
                delta_cmd: delta(t),
                delta_act: delta(t),
                v_cmd: v,
                rho_ref: p.rho,
                lat_err: 0.0,
                s_proj: s,
            });
        }
        let n_rows = rows.len();
        RunTrace {
            rows,
            cpu_us_controller: vec![1.0; n_rows],
            cpu_us_planner: vec![2.0; n_rows],
            cpu_us_msnn: vec![3.0; n_rows],
            crash: None,
            laps_completed: 0,
            lap_times: Vec::new(),
            timed_out: false,
            tick_rate,
        }
    }

    #[test]
    fn glued_vehicle_has_zero_error_and_counted_laps() {
        let (_, _, line) = oval_setup();
        let lap = line.path.total_len / 2.0;
        let trace = glued_trace(&line, 2.2 * lap, 150.0, |_| 0.1);
        let m = compute_metrics(&trace, &line).unwrap();
        assert!(m.mean_lat_err < 1e-9, "mean {}", m.mean_lat_err);
        assert!(m.max_lat_err < 1e-9);
        assert_eq!(m.rms_steering_rate, 0.0);
        assert_eq!(m.lap_times.len(), 2);
        let expect = lap;
        assert!((m.lap_time.unwrap() - expect).abs() < 0.05, "{:?}", m.lap_time);
        assert!(!m.crash && !m.partial);
        assert_eq!(m.cpu_planner.mean_us, 2.0);
    }

    #[test]
    fn sinusoidal_steering_rate_matches_closed_form() {
        let (_, _, line) = oval_setup();
        let omega = 2.0 * std::f64::consts::PI * 2.0;
        let amp = 0.3;
        // integer number of periods keeps the discrete mean unbiased
        let trace = glued_trace(&line, 4.0, 150.0, |t| amp * (omega * t).sin());
        let m = compute_metrics(&trace, &line).unwrap();
        let expect = amp * omega / SQRT_2;
        let rel = (m.rms_steering_rate - expect).abs() / expect;
        assert!(rel < 0.01, "rms {} vs {expect}", m.rms_steering_rate);
    }

    use std::f64::consts::SQRT_2;

    #[test]
    fn short_partial_trace_flags_itself() {
        let (_, _, line) = oval_setup();
        let trace = glued_trace(&line, 0.5, 150.0, |_| 0.0);
        let m = compute_metrics(&trace, &line).unwrap();
        assert!(m.partial);
        assert_eq!(m.lap_time, None);
        assert!(compute_metrics(
            &RunTrace { rows: vec![], ..glued_trace(&line, 0.5, 150.0, |_| 0.0) },
            &line
        )
        .is_err());
    }

    #[test]
    fn ablation_grid_runs_all_cells_deterministically() {
        let (track, path, _) = oval_setup();
        let grid = AblationGrid {
            controllers: vec![ControllerKind::PurePursuit, ControllerKind::Clothoid],
            msnn: vec![false],
            replan: vec![false, true],
            presets: vec![GgvPreset { name: "cautious".into(), ggv: cautious_ggv() }],
        };
        let plant = PlantConfig::default();
        let a = run_ablation(&track, &path, None, &grid, &plant, 1, 3, 2).unwrap();
        assert_eq!(a.outcomes.len(), 4);
        assert_eq!(a.traces.len(), 4);
        for o in &a.outcomes {
            assert!(!o.metrics.crash, "cell {:?} crashed", o.cell);
            assert_eq!(o.metrics.lap_times.len(), 1);
        }
        let b = run_ablation(&track, &path, None, &grid, &plant, 1, 3, 1).unwrap();
        assert_eq!(a.summary_table(), b.summary_table());
        // fixed grid order: controllers outermost, then msnn, replan, preset
        assert_eq!(a.outcomes[0].cell.controller, ControllerKind::PurePursuit);
        assert!(!a.outcomes[0].cell.replan && a.outcomes[1].cell.replan);
    }

    #[test]
    fn msnn_cells_require_a_model() {
        let (track, path, _) = oval_setup();
        let grid = AblationGrid {
            controllers: vec![ControllerKind::PurePursuit],
            msnn: vec![true],
            replan: vec![false],
            presets: vec![GgvPreset { name: "cautious".into(), ggv: cautious_ggv() }],
        };
        let e = run_ablation(&track, &path, None, &grid, &PlantConfig::default(), 1, 0, 1);
        assert!(matches!(e, Err(HarnessError::MissingModel)));
    }

    #[test]
    fn expansion_returns_last_feasible_envelope() {
        let (track, path, _) = oval_setup();
        let base = cautious_ggv();
        let stack = StackConfig::new(ControllerKind::PurePursuit, base.clone());
        let plant = PlantConfig::default();
        let (expanded, log) = expand_ggv(
            &base,
            &track,
            &path,
            &stack,
            &plant,
            0.25,
            FeasibilityBounds::default(),
            1,
            0,
            12,
        )
        .unwrap();
        assert!(expanded.dominates(&base));
        // postcondition: last logged candidate infeasible, previous feasible
        let last = log.last().unwrap();
        assert!(!last.feasible, "search never hit the limit: {log:?}");
        assert!(log[log.len() - 2].feasible);
        let back = log[log.len() - 2].factor;
        assert!((expanded.ay_max_at(0.0) / base.ay_max_at(0.0) - back).abs() < 1e-12);
    }

    #[test]
    fn degenerate_first_step_returns_base() {
        let (track, path, _) = oval_setup();
        let base = cautious_ggv();
        let stack = StackConfig::new(ControllerKind::PurePursuit, base.clone());
        let (expanded, log) = expand_ggv(
            &base,
            &track,
            &path,
            &stack,
            &PlantConfig::default(),
            20.0,
            FeasibilityBounds::default(),
            1,
            0,
            5,
        )
        .unwrap();
        assert_eq!(log.len(), 2);
        assert!(!log[1].feasible);
        assert!((expanded.ay_max_at(1.0) - base.ay_max_at(1.0)).abs() < 1e-12);
    }

    #[test]
    fn infeasible_base_is_rejected() {
        let (track, path, _) = oval_setup();
        let silly = cautious_ggv().scaled(30.0);
        let stack = StackConfig::new(ControllerKind::PurePursuit, silly.clone());
        let e = expand_ggv(
            &silly,
            &track,
            &path,
            &stack,
            &PlantConfig::default(),
            0.2,
            FeasibilityBounds::default(),
            1,
            0,
            3,
        );
        assert!(matches!(e, Err(HarnessError::BaseInfeasible(_))));
    }

    #[test]
    fn window_counts_match_a_naive_enumerator() {
        let (_, _, line) = oval_setup();
        for (w, t_s, stride) in [(9usize, 0.05, 1usize), (9, 0.05, 7), (4, 0.1, 3), (0, 0.05, 2)] {
            let trace = glued_trace(&line, 3.0, 150.0, |t| 0.1 * t.sin());
            let (train, val) = extract_dataset(&trace, w, t_s, 0.75, stride).unwrap();
            let got = train.samples.len() + val.samples.len();
            // naive: try every stride-aligned start, keep those whose last
            // sample still lands inside the trace
            let n = trace.rows.len();
            let mut naive = 0;
            let mut k = 0;
            while k < n {
                let t_last = trace.rows[k].t + w as f64 * t_s;
                if t_last <= trace.rows[n - 1].t + 1e-9 {
                    naive += 1;
                }
                k += stride;
            }
            assert_eq!(got, naive, "w={w} t_s={t_s} stride={stride}");
            let span = (w as f64 * t_s * trace.tick_rate).ceil() as usize;
            let formula = (n - 1 - span) / stride + 1;
            assert_eq!(got, formula, "closed-form count w={w} stride={stride}");
        }
    }

    #[test]
    fn split_is_chronological_three_to_one() {
        let (_, _, line) = oval_setup();
        let trace = glued_trace(&line, 24.0, 150.0, |t| 0.05 * t.cos());
        let (train, val) = extract_dataset(&trace, 9, 0.05, 0.75, 8).unwrap();
        assert_eq!(train.split, SplitTag::Train);
        assert_eq!(val.split, SplitTag::Validation);
        let ratio = train.samples.len() as f64 / val.samples.len() as f64;
        assert!((ratio - 3.0).abs() < 0.1, "ratio {ratio}");
        // roughly 18 s / 6 s of window starts
        let train_span = train.samples.len() as f64 * 8.0 / 150.0;
        assert!((train_span - 18.0).abs() < 0.5, "train span {train_span}");
        // windows carry future curvature: v channel constant, ay = v^2 rho
        let s0 = &train.samples[0];
        assert!((s0.window.v[0] - 2.0).abs() < 1e-12);
        assert!((s0.window.ay[3] - 4.0 * s0.window.rho[3]).abs() < 1e-12);
    }

    #[test]
    fn crash_and_short_traces_are_rejected() {
        let (_, _, line) = oval_setup();
        let mut crashed = glued_trace(&line, 3.0, 150.0, |_| 0.0);
        crashed.crash = Some(crate::sim::CrashInfo { tick: 1, x: 0.0, y: 0.0 });
        assert!(matches!(
            extract_dataset(&crashed, 9, 0.05, 0.75, 1),
            Err(HarnessError::CrashTrace)
        ));
        let tiny = glued_trace(&line, 0.2, 150.0, |_| 0.0);
        assert!(matches!(
            extract_dataset(&tiny, 9, 0.05, 0.75, 1),
            Err(HarnessError::TooShort { .. })
        ));
    }

    #[test]
    fn windows_crossing_a_time_gap_are_dropped() {
        let (_, _, line) = oval_setup();
        let mut trace = glued_trace(&line, 3.0, 150.0, |_| 0.0);
        let n = trace.rows.len();
        // open a gap mid-trace
        for r in trace.rows.iter_mut().skip(n / 2) {
            r.t += 1.0;
        }
        let (train, val) = extract_dataset(&trace, 9, 0.05, 0.75, 1).unwrap();
        let got = train.samples.len() + val.samples.len();
        let span = (9.0_f64 * 0.05 * 150.0).ceil() as usize;
        // exactly `span` starts straddle the gap and are dropped
        let candidates = n - span;
        assert_eq!(got, candidates - span, "got {got}");
    }
}
