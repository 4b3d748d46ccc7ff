//! Deterministic closed-loop simulator. A linear-tire dynamic bicycle with
//! actuator delay and lag stands in for the car; the control loop runs in
//! lockstep at a fixed tick rate: project, build a curvature reference,
//! attach speed/acceleration previews (online replanning or raceline
//! lookup), steer through the network or the kinematic map, command the
//! plant. Everything is logged per tick.

use crate::control::{
    curvature_horizon, kinematic_steering, pure_pursuit_curvature, ClothoidTracker,
    ControllerKind, CurvatureReference, LookaheadSchedule, DEFAULT_CL_PREVIEW,
};
use crate::geometry::{resample_corridor, Corridor, PoseCurv, TrackDefinition};
use crate::ggv::GgvDiagram;
use crate::msnn::{msnn_forward, MsnnModel, ReferenceWindow};
use crate::raceline::{Raceline, VEHICLE_HALF_WIDTH};
use crate::velocity::plan_speed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad plant config: {0}")]
    BadPlant(&'static str),
    #[error("bad stack config: {0}")]
    BadStack(String),
    #[error("non-finite command at tick {0}")]
    NonFiniteCommand(usize),
    #[error(transparent)]
    Track(#[from] crate::geometry::TrackError),
    #[error(transparent)]
    Speed(#[from] crate::velocity::VelocityError),
    #[error("trace file parse: line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("trace file io: {0}")]
    Io(#[from] std::io::Error),
}

// ── plant ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
    pub delta_act: f64,
}

impl VehicleState {
    pub fn at_rest(x: f64, y: f64, psi: f64) -> Self {
        Self { x, y, psi, vx: 0.0, vy: 0.0, r: 0.0, delta_act: 0.0 }
    }

    fn is_finite(&self) -> bool {
        [self.x, self.y, self.psi, self.vx, self.vy, self.r, self.delta_act]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// 1:10-scale parameters. The acceleration cap sits above every
/// acceleration envelope preset so the envelope, not the plant, binds in
/// nominal runs; cornering stiffnesses give a mildly understeering car.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub wheelbase: f64,
    pub dist_front: f64,
    pub dist_rear: f64,
    pub mass: f64,
    pub yaw_inertia: f64,
    pub stiffness_front: f64,
    pub stiffness_rear: f64,
    pub steer_delay: f64,
    pub steer_lag: f64,
    pub steer_range: f64,
    pub speed_lag: f64,
    pub accel_cap: f64,
    pub tick_rate: f64,
    pub substeps: u32,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            wheelbase: 0.33,
            dist_front: 0.16,
            dist_rear: 0.17,
            mass: 3.5,
            yaw_inertia: 0.05,
            stiffness_front: 45.0,
            stiffness_rear: 55.0,
            steer_delay: 0.15,
            steer_lag: 0.05,
            steer_range: 0.45,
            speed_lag: 0.1,
            accel_cap: 6.0,
            tick_rate: 150.0,
            substeps: 2,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let pos = [
            self.wheelbase,
            self.dist_front,
            self.dist_rear,
            self.mass,
            self.yaw_inertia,
            self.stiffness_front,
            self.stiffness_rear,
            self.steer_lag,
            self.steer_range,
            self.speed_lag,
            self.accel_cap,
            self.tick_rate,
        ];
        if pos.iter().any(|&v| !(v > 0.0)) || self.substeps == 0 || self.steer_delay < 0.0 {
            return Err(SimError::BadPlant("all parameters must be positive"));
        }
        if (self.dist_front + self.dist_rear - self.wheelbase).abs() > 1e-9 {
            return Err(SimError::BadPlant("axle distances must sum to the wheelbase"));
        }
        let steps = self.steer_delay * self.tick_rate * self.substeps as f64;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(SimError::BadPlant("steer delay must be a whole number of substeps"));
        }
        Ok(())
    }

    pub fn substep_dt(&self) -> f64 {
        1.0 / (self.tick_rate * self.substeps as f64)
    }

    fn delay_steps(&self) -> usize {
        (self.steer_delay * self.tick_rate * self.substeps as f64).round() as usize
    }
}

/// Plant with its actuator pipeline: commands pass through a pure delay
/// line, then a first-order lag onto the actual steering angle.
#[derive(Debug, Clone)]
pub struct Plant {
    pub cfg: PlantConfig,
    pub state: VehicleState,
    delay_line: VecDeque<f64>,
}

/// Speed floor for slip-angle kinematics; below it the lateral model
/// degenerates.
pub const V_SLIP_FLOOR: f64 = 0.3;

fn derivatives(s: &VehicleState, delta: f64, v_cmd: f64, cfg: &PlantConfig) -> [f64; 7] {
    let vx_eff = s.vx.max(V_SLIP_FLOOR);
    let alpha_f = (s.vy + cfg.dist_front * s.r) / vx_eff - delta;
    let alpha_r = (s.vy - cfg.dist_rear * s.r) / vx_eff;
    let fyf = -cfg.stiffness_front * alpha_f;
    let fyr = -cfg.stiffness_rear * alpha_r;
    let ax = ((v_cmd - s.vx) / cfg.speed_lag).clamp(-cfg.accel_cap, cfg.accel_cap);
    [
        s.vx * s.psi.cos() - s.vy * s.psi.sin(),
        s.vx * s.psi.sin() + s.vy * s.psi.cos(),
        s.r,
        ax,
        (fyf + fyr) / cfg.mass - s.vx * s.r,
        (cfg.dist_front * fyf - cfg.dist_rear * fyr) / cfg.yaw_inertia,
        0.0, // delta_act integrated separately with its own input
    ]
}

fn add_scaled(s: &VehicleState, d: &[f64; 7], h: f64) -> VehicleState {
    VehicleState {
        x: s.x + h * d[0],
        y: s.y + h * d[1],
        psi: s.psi + h * d[2],
        vx: s.vx + h * d[3],
        vy: s.vy + h * d[4],
        r: s.r + h * d[5],
        delta_act: s.delta_act + h * d[6],
    }
}

impl Plant {
    pub fn new(cfg: PlantConfig, initial: VehicleState) -> Result<Self, SimError> {
        cfg.validate()?;
        let delay_line = VecDeque::from(vec![initial.delta_act; cfg.delay_steps()]);
        Ok(Self { cfg, state: initial, delay_line })
    }

    /// One control tick: the clamped command enters the delay line and the
    /// state advances `substeps` RK4 steps.
    pub fn step(&mut self, delta_cmd: f64, v_cmd: f64) {
        let cfg = self.cfg.clone();
        let dt = cfg.substep_dt();
        let cmd = delta_cmd.clamp(-cfg.steer_range, cfg.steer_range);
        let v_cmd = v_cmd.max(0.0);
        for _ in 0..cfg.substeps {
            let delayed = if self.delay_line.is_empty() {
                cmd
            } else {
                self.delay_line.push_back(cmd);
                self.delay_line.pop_front().unwrap()
            };
            let s = self.state;
            // steering lag is linear with a held input: integrate exactly
            let decay = (-dt / cfg.steer_lag).exp();
            let delta_next = delayed + (s.delta_act - delayed) * decay;
            let delta_mid = delayed + (s.delta_act - delayed) * (-0.5 * dt / cfg.steer_lag).exp();

            let k1 = derivatives(&s, s.delta_act, v_cmd, &cfg);
            let s2 = add_scaled(&s, &k1, dt / 2.0);
            let k2 = derivatives(&s2, delta_mid, v_cmd, &cfg);
            let s3 = add_scaled(&s, &k2, dt / 2.0);
            let k3 = derivatives(&s3, delta_mid, v_cmd, &cfg);
            let s4 = add_scaled(&s, &k3, dt);
            let k4 = derivatives(&s4, delta_next, v_cmd, &cfg);

            let mut blend = [0.0f64; 7];
            for i in 0..7 {
                blend[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
            }
            let mut out = add_scaled(&s, &blend, dt);
            out.vx = out.vx.max(0.0);
            out.delta_act = delta_next;
            self.state = out;
        }
    }
}

// ── stack configuration ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub controller: ControllerKind,
    pub schedule: LookaheadSchedule,
    /// Preview time at which the direct kinematic map samples a spiral
    /// reference; the learned map reads the window from the vehicle.
    pub cl_preview: f64,
    pub msnn: Option<MsnnModel>,
    /// Replan speed online over the curvature reference; off means the
    /// raceline profile is looked up as-is.
    pub online_replan: bool,
    pub ggv: GgvDiagram,
    /// Preview window length is w+1 samples at period t_s.
    pub w: usize,
    pub t_s: f64,
    /// Standard deviation of optional position noise fed to the
    /// controllers; zero keeps the loop noise-free.
    pub pose_noise_std: f64,
}

impl StackConfig {
    pub fn new(controller: ControllerKind, ggv: GgvDiagram) -> Self {
        let schedule = match controller {
            ControllerKind::PurePursuit => LookaheadSchedule::pure_pursuit_default(),
            ControllerKind::Clothoid => LookaheadSchedule::clothoid_default(),
        };
        Self {
            controller,
            schedule,
            cl_preview: DEFAULT_CL_PREVIEW,
            msnn: None,
            online_replan: false,
            ggv,
            w: 9,
            t_s: 0.05,
            pose_noise_std: 0.0,
        }
    }
}

// ── traces ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
    pub delta_cmd: f64,
    pub delta_act: f64,
    pub v_cmd: f64,
    pub rho_ref: f64,
    pub lat_err: f64,
    pub s_proj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrashInfo {
    pub tick: usize,
    pub x: f64,
    pub y: f64,
}

/// Full log of one closed-loop run. Rows are deterministic for a fixed
/// config and seed; the per-tick compute times are wall-clock measurements
/// and live outside the rows so determinism checks can ignore them.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub cpu_us_controller: Vec<f64>,
    pub cpu_us_planner: Vec<f64>,
    pub cpu_us_msnn: Vec<f64>,
    pub crash: Option<CrashInfo>,
    pub laps_completed: usize,
    pub lap_times: Vec<f64>,
    pub timed_out: bool,
    pub tick_rate: f64,
}

impl RunTrace {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# tick_rate={}\n", self.tick_rate));
        out.push_str(&format!("# laps_completed={}\n", self.laps_completed));
        out.push_str(&format!(
            "# lap_times={}\n",
            self.lap_times.iter().map(|t| format!("{t}")).collect::<Vec<_>>().join(";")
        ));
        if let Some(c) = &self.crash {
            out.push_str(&format!("# crash={},{},{}\n", c.tick, c.x, c.y));
        }
        if self.timed_out {
            out.push_str("# timed_out=true\n");
        }
        out.push_str("t,x,y,psi,vx,vy,r,delta_cmd,delta_act,v_cmd,rho_ref,lat_err,s_proj,cpu_us_controller,cpu_us_planner,cpu_us_msnn\n");
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.t,
                r.x,
                r.y,
                r.psi,
                r.vx,
                r.vy,
                r.r,
                r.delta_cmd,
                r.delta_act,
                r.v_cmd,
                r.rho_ref,
                r.lat_err,
                r.s_proj,
                self.cpu_us_controller[i],
                self.cpu_us_planner[i],
                self.cpu_us_msnn[i],
            ));
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self, SimError> {
        let mut trace = RunTrace {
            rows: Vec::new(),
            cpu_us_controller: Vec::new(),
            cpu_us_planner: Vec::new(),
            cpu_us_msnn: Vec::new(),
            crash: None,
            laps_completed: 0,
            lap_times: Vec::new(),
            timed_out: false,
            tick_rate: 0.0,
        };
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| SimError::Parse { line: lineno + 1, reason };
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("tick_rate=") {
                    trace.tick_rate =
                        v.parse().map_err(|_| bad(format!("bad tick_rate {v:?}")))?;
                } else if let Some(v) = rest.strip_prefix("laps_completed=") {
                    trace.laps_completed =
                        v.parse().map_err(|_| bad(format!("bad laps_completed {v:?}")))?;
                } else if let Some(v) = rest.strip_prefix("lap_times=") {
                    if !v.is_empty() {
                        trace.lap_times = v
                            .split(';')
                            .map(|x| x.parse())
                            .collect::<Result<_, _>>()
                            .map_err(|_| bad(format!("bad lap_times {v:?}")))?;
                    }
                } else if let Some(v) = rest.strip_prefix("crash=") {
                    let parts: Vec<&str> = v.split(',').collect();
                    if parts.len() != 3 {
                        return Err(bad(format!("bad crash record {v:?}")));
                    }
                    trace.crash = Some(CrashInfo {
                        tick: parts[0].parse().map_err(|_| bad("bad crash tick".into()))?,
                        x: parts[1].parse().map_err(|_| bad("bad crash x".into()))?,
                        y: parts[2].parse().map_err(|_| bad("bad crash y".into()))?,
                    });
                } else if rest == "timed_out=true" {
                    trace.timed_out = true;
                }
                continue;
            }
            if !saw_header {
                saw_header = true;
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse()).collect();
            let vals = vals.map_err(|_| bad("bad number".into()))?;
            if vals.len() != 16 {
                return Err(bad(format!("expected 16 fields, got {}", vals.len())));
            }
            trace.rows.push(TraceRow {
                t: vals[0],
                x: vals[1],
                y: vals[2],
                psi: vals[3],
                vx: vals[4],
                vy: vals[5],
                r: vals[6],
                delta_cmd: vals[7],
                delta_act: vals[8],
                v_cmd: vals[9],
                rho_ref: vals[10],
                lat_err: vals[11],
                s_proj: vals[12],
            });
            trace.cpu_us_controller.push(vals[13]);
            trace.cpu_us_planner.push(vals[14]);
            trace.cpu_us_msnn.push(vals[15]);
        }
        Ok(trace)
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self, SimError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

// ── preview assembly ────────────────────────────────────────────────────

/// Resample space-domain profiles (uniform ds, shared grid) into a
/// time-domain window at period t_s, walking cell traversal times; the
/// final values hold past the end of the horizon.
pub fn time_sample_window(
    rho: &[f64],
    v: &[f64],
    ax: &[f64],
    ay: &[f64],
    ds: f64,
    t_s: f64,
    w1: usize,
) -> ReferenceWindow {
    let n = rho.len();
    debug_assert!(v.len() == n && ax.len() == n && ay.len() == n && n >= 2);
    let mut t_grid = Vec::with_capacity(n);
    t_grid.push(0.0);
    for i in 0..n - 1 {
        let pair = (v[i] + v[i + 1]).max(2.0 * V_SLIP_FLOOR);
        t_grid.push(t_grid[i] + 2.0 * ds / pair);
    }
    let mut out = ReferenceWindow {
        rho: Vec::with_capacity(w1),
        v: Vec::with_capacity(w1),
        ay: Vec::with_capacity(w1),
        ax: Vec::with_capacity(w1),
    };
    let mut cell = 0usize;
    for k in 0..w1 {
        let t = k as f64 * t_s;
        while cell + 1 < n - 1 && t_grid[cell + 1] < t {
            cell += 1;
        }
        let span = t_grid[cell + 1] - t_grid[cell];
        let tau = if span > 0.0 { ((t - t_grid[cell]) / span).clamp(0.0, 1.0) } else { 0.0 };
        let pick = |a: &[f64]| a[cell] + (a[cell + 1] - a[cell]) * tau;
        out.rho.push(pick(rho));
        out.v.push(pick(v));
        out.ay.push(pick(ay));
        out.ax.push(pick(ax));
    }
    out
}

/// Raceline profile values at arc length s (wrapped), linearly
/// interpolated on the profile grid.
fn sample_profile(line: &Raceline, s: f64) -> (f64, f64, f64) {
    let n = line.v.len();
    let ds = line.grid_step();
    let total = line.path.total_len;
    let s = if line.path.closed { s.rem_euclid(total) } else { s.clamp(0.0, total) };
    let fi = (s / ds).min((n - 1) as f64 + 0.999_999);
    let i = (fi.floor() as usize).min(n - 1);
    let j = if line.path.closed { (i + 1) % n } else { (i + 1).min(n - 1) };
    let tau = (fi - i as f64).clamp(0.0, 1.0);
    let pick = |a: &[f64]| a[i] + (a[j] - a[i]) * tau;
    (pick(&line.v), pick(&line.ax), pick(&line.ay))
}

// ── closed loop ─────────────────────────────────────────────────────────

fn micros_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e6
}

/// Run the full stack for `laps` laps (or until crash/time-out), starting
/// from a rolling start on the raceline.
pub fn run_closed_loop(
    raceline: &Raceline,
    track: &TrackDefinition,
    stack: &StackConfig,
    plant_cfg: &PlantConfig,
    laps: usize,
    seed: u64,
) -> Result<RunTrace, SimError> {
    plant_cfg.validate()?;
    stack.schedule.validate().map_err(|e| SimError::BadStack(e.to_string()))?;
    if let Some(m) = &stack.msnn {
        m.validate().map_err(|e| SimError::BadStack(e.to_string()))?;
        if m.window_len() != stack.w + 1 {
            return Err(SimError::BadStack(format!(
                "model window {} does not match stack preview {}",
                m.window_len(),
                stack.w + 1
            )));
        }
    }
    let corridor: Corridor = resample_corridor(track, 0.05)?;

    let tick_rate = plant_cfg.tick_rate;
    let dt = 1.0 / tick_rate;
    let total = raceline.path.total_len;
    let mut trace = RunTrace {
        rows: Vec::new(),
        cpu_us_controller: Vec::new(),
        cpu_us_planner: Vec::new(),
        cpu_us_msnn: Vec::new(),
        crash: None,
        laps_completed: 0,
        lap_times: Vec::new(),
        timed_out: false,
        tick_rate,
    };
    if laps == 0 {
        return Ok(trace);
    }

    // rolling start on the raceline
    let p0 = raceline.path.sample(0.0);
    let mut init = VehicleState::at_rest(p0.x, p0.y, p0.psi);
    init.vx = raceline.v[0];
    init.delta_act = kinematic_steering(p0.rho, plant_cfg.wheelbase);
    let mut plant = Plant::new(plant_cfg.clone(), init)?;
    let mut cl = ClothoidTracker::new(stack.schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let lap_est = raceline.lap_time();
    let max_ticks = ((laps as f64 * lap_est * 4.0 + 60.0) * tick_rate) as usize;
    let mut prev_s = 0.0f64;
    let mut lap_start_t = 0.0f64;
    let w1 = stack.w + 1;

    for tick in 0..max_ticks {
        let t = tick as f64 * dt;
        let s = plant.state;

        let (px, py) = if stack.pose_noise_std > 0.0 {
            let nx: f64 = rng.gen_range(-1.0..1.0) * stack.pose_noise_std;
            let ny: f64 = rng.gen_range(-1.0..1.0) * stack.pose_noise_std;
            (s.x + nx, s.y + ny)
        } else {
            (s.x, s.y)
        };

        // controller: curvature reference over the preview horizon
        let t_ctrl = Instant::now();
        let (v_rl, _, _) = sample_profile(raceline, prev_s);
        let v_hint = s.vx.max(v_rl).max(2.0 * V_SLIP_FLOOR);
        let horizon = curvature_horizon(1.25 * v_hint, stack.w, stack.t_s);
        // pose curvature = estimated path curvature from yaw rate
        let pose = PoseCurv::new(px, py, s.psi, s.r / s.vx.max(V_SLIP_FLOOR));
        let reference: CurvatureReference = match stack.controller {
            ControllerKind::PurePursuit => {
                pure_pursuit_curvature(pose, s.vx, raceline, &stack.schedule, horizon)
            }
            ControllerKind::Clothoid => cl.curvature(pose, s.vx, raceline, horizon),
        };
        let cpu_ctrl = micros_since(t_ctrl);

        // planner: speed/acceleration previews on the reference grid
        let t_plan = Instant::now();
        let m = reference.rho.len();
        let ds = reference.ds;
        let (v_prof, ax_prof) = if stack.online_replan {
            // replan on the path's own curvature ahead of the projection:
            // the tracker's corrective arc would double-count curvature the
            // vehicle is about to shed and slow the lap for every wiggle.
            // Terminal speed anchors on the stored profile, which is
            // feasible forever, so every replanned horizon stays safe.
            let mut rho_path = Vec::with_capacity(m);
            for k in 0..m {
                rho_path.push(raceline.path.sample(reference.s_proj + k as f64 * ds).rho);
            }
            let (v_term, _, _) =
                sample_profile(raceline, reference.s_proj + (m - 1) as f64 * ds);
            let plan = plan_speed(&rho_path, ds, s.vx, &stack.ggv, v_term)?;
            (plan.v, plan.ax)
        } else {
            let mut v = Vec::with_capacity(m);
            let mut ax = Vec::with_capacity(m);
            for k in 0..m {
                let (vv, xa, _) = sample_profile(raceline, reference.s_proj + k as f64 * ds);
                v.push(vv);
                ax.push(xa);
            }
            (v, ax)
        };
        // The replanner commands its plan one servo constant ahead so the
        // first-order speed loop realizes the freshly planned acceleration;
        // the static profile is commanded at the current position, which is
        // what following a precomputed schedule means (the servo lags it).
        let v_cmd = if stack.online_replan {
            let d_cmd = (s.vx * plant_cfg.speed_lag).max(ds);
            let idx = ((d_cmd / ds) as usize).min(v_prof.len() - 1);
            let frac = (d_cmd / ds - idx as f64).clamp(0.0, 1.0);
            if idx + 1 < v_prof.len() {
                v_prof[idx] + (v_prof[idx + 1] - v_prof[idx]) * frac
            } else {
                v_prof[idx]
            }
        } else {
            v_prof[0]
        };
        let cpu_plan = micros_since(t_plan);

        // steering
        let t_net = Instant::now();
        let delta_cmd = if let Some(model) = &stack.msnn {
            // The preview fed to the learned map has to describe a motion
            // the envelope permits. Planner speeds are keyed to the path
            // while the reference curvature carries the tracker's
            // correction on top, and pairing the two verbatim can claim
            // cornering harder than any feasible run, so the learned
            // speed-scaled terms extrapolate and over-steer the correction.
            // Capping each speed sample at the cornering speed of the
            // curvature it rides with keeps the window self-consistent;
            // the cap is idle wherever the reference agrees with the path.
            let v_win: Vec<f64> = reference
                .rho
                .iter()
                .zip(&v_prof)
                .map(|(&rho, &v)| v.min(stack.ggv.max_cornering_speed(rho)))
                .collect();
            let ay_win: Vec<f64> = reference
                .rho
                .iter()
                .zip(&v_win)
                .map(|(&rho, &v)| v * v * rho)
                .collect();
            let win = time_sample_window(
                &reference.rho,
                &v_win,
                &ax_prof,
                &ay_win,
                ds,
                stack.t_s,
                w1,
            );
            msnn_forward(model, &win)
        } else {
            // The direct map carries no latency model, so for the spiral
            // reference, whose first sample merely restates the vehicle's
            // own curvature, it samples a preview time ahead to get
            // control authority. The pursuit arc holds its curvature from
            // the vehicle onward, so it is read at the start.
            let d_prev = match stack.controller {
                ControllerKind::Clothoid => s.vx.max(0.3) * stack.cl_preview,
                ControllerKind::PurePursuit => 0.0,
            };
            kinematic_steering(reference.sample_at(d_prev), plant_cfg.wheelbase)
        };
        let cpu_net = micros_since(t_net);

        if !delta_cmd.is_finite() || !v_cmd.is_finite() {
            return Err(SimError::NonFiniteCommand(tick));
        }

        trace.rows.push(TraceRow {
            t,
            x: s.x,
            y: s.y,
            psi: s.psi,
            vx: s.vx,
            vy: s.vy,
            r: s.r,
            delta_cmd,
            delta_act: s.delta_act,
            v_cmd,
            rho_ref: reference.rho[0],
            lat_err: reference.lateral_error,
            s_proj: reference.s_proj,
        });
        trace.cpu_us_controller.push(cpu_ctrl);
        trace.cpu_us_planner.push(cpu_plan);
        trace.cpu_us_msnn.push(cpu_net);

        // lap accounting from projection wrap events
        if prev_s > 0.7 * total && reference.s_proj < 0.3 * total {
            trace.laps_completed += 1;
            trace.lap_times.push(t - lap_start_t);
            lap_start_t = t;
            if trace.laps_completed >= laps {
                return Ok(trace);
            }
        }
        prev_s = reference.s_proj;

        plant.step(delta_cmd, v_cmd);
        if !plant.state.is_finite() {
            trace.crash = Some(CrashInfo { tick, x: s.x, y: s.y });
            trace.lap_times.clear();
            return Ok(trace);
        }

        // crash when the footprint circle leaves the corridor
        let cp = corridor.path.project(plant.state.x, plant.state.y);
        let (wl, wr) = corridor.half_widths_at(cp.s_star);
        let bound = if cp.lateral_error >= 0.0 { wl } else { wr };
        if cp.lateral_error.abs() + VEHICLE_HALF_WIDTH > bound {
            trace.crash = Some(CrashInfo { tick, x: plant.state.x, y: plant.state.y });
            trace.lap_times.clear();
            return Ok(trace);
        }
    }
    trace.timed_out = true;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{cautious_ggv, oval_track};
    use crate::raceline::{min_curvature_path, profile_raceline, PLANNING_MARGIN};

    fn oval_raceline(ggv: &GgvDiagram) -> (Raceline, TrackDefinition) {
        let track = oval_track();
        let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
        (profile_raceline(&path, ggv).unwrap(), track)
    }

    #[test]
    fn straight_line_motion_stays_straight() {
        let cfg = PlantConfig::default();
        let mut plant =
            Plant::new(cfg, VehicleState { vx: 2.0, ..VehicleState::at_rest(0.0, 0.0, 0.0) })
                .unwrap();
        for _ in 0..300 {
            plant.step(0.0, 2.0);
        }
        let s = plant.state;
        assert!(s.x > 3.0);
        assert_eq!(s.y, 0.0);
        assert_eq!(s.vy, 0.0);
        assert_eq!(s.r, 0.0);
        assert!((s.vx - 2.0).abs() < 1e-9);
    }

    #[test]
    fn steady_state_yaw_rate_matches_bicycle_closed_form() {
        let cfg = PlantConfig::default();
        let mut plant =
            Plant::new(cfg.clone(), VehicleState { vx: 2.0, ..VehicleState::at_rest(0.0, 0.0, 0.0) })
                .unwrap();
        let delta = 0.05;
        for _ in 0..(5.0 * cfg.tick_rate) as usize {
            plant.step(delta, 2.0);
        }
        let s = plant.state;
        // understeer gradient of the linear single-track model
        let k = cfg.mass * (cfg.dist_rear * cfg.stiffness_rear - cfg.dist_front * cfg.stiffness_front)
            / (cfg.wheelbase * cfg.stiffness_front * cfg.stiffness_rear);
        let r_expect = s.vx * delta / (cfg.wheelbase + k * s.vx * s.vx);
        assert!((s.r - r_expect).abs() < 1e-3, "{} vs {r_expect}", s.r);
    }

    #[test]
    fn steering_response_is_delay_plus_first_order_lag() {
        let cfg = PlantConfig::default();
        let mut plant = Plant::new(cfg.clone(), VehicleState::at_rest(0.0, 0.0, 0.0)).unwrap();
        let step_cmd = 0.2;
        let dt = 1.0 / cfg.tick_rate;
        let mut trace = Vec::new();
        for _ in 0..(0.5 * cfg.tick_rate) as usize {
            plant.step(step_cmd, 0.0);
            trace.push(plant.state.delta_act);
        }
        for (i, &d) in trace.iter().enumerate() {
            let t = (i + 1) as f64 * dt;
            if t <= cfg.steer_delay {
                assert_eq!(d, 0.0, "moved before the pure delay elapsed (t={t})");
            } else {
                let expect = step_cmd * (1.0 - (-(t - cfg.steer_delay) / cfg.steer_lag).exp());
                assert!(
                    (d - expect).abs() <= 0.02 * step_cmd,
                    "t={t}: {d} vs {expect}"
                );
            }
        }
        let t63 = cfg.steer_delay + cfg.steer_lag;
        let i63 = (t63 * cfg.tick_rate).round() as usize - 1;
        assert!((trace[i63] / step_cmd - 0.632).abs() < 0.02);
    }

    #[test]
    fn coasting_to_zero_command_decays_monotonically() {
        let cfg = PlantConfig::default();
        let mut plant =
            Plant::new(cfg, VehicleState { vx: 3.0, ..VehicleState::at_rest(0.0, 0.0, 0.0) })
                .unwrap();
        let mut prev = 3.0;
        for _ in 0..300 {
            plant.step(0.0, 0.0);
            assert!(plant.state.vx <= prev + 1e-12);
            prev = plant.state.vx;
        }
        assert!(prev < 1e-3, "still moving: {prev}");
    }

    #[test]
    fn zero_lap_request_is_an_empty_trace() {
        let ggv = cautious_ggv();
        let (line, track) = oval_raceline(&ggv);
        let stack = StackConfig::new(ControllerKind::PurePursuit, ggv);
        let trace =
            run_closed_loop(&line, &track, &stack, &PlantConfig::default(), 0, 0).unwrap();
        assert!(trace.rows.is_empty());
        assert!(trace.crash.is_none());
    }

    #[test]
    fn pure_pursuit_completes_laps_on_the_oval() {
        let ggv = cautious_ggv();
        let (line, track) = oval_raceline(&ggv);
        let stack = StackConfig::new(ControllerKind::PurePursuit, ggv.clone());
        let trace =
            run_closed_loop(&line, &track, &stack, &PlantConfig::default(), 2, 0).unwrap();
        assert!(trace.crash.is_none(), "crashed at {:?}", trace.crash);
        assert_eq!(trace.laps_completed, 2);
        assert_eq!(trace.lap_times.len(), 2);
        assert!(!trace.timed_out);
        let worst_lat =
            trace.rows.iter().map(|r| r.lat_err.abs()).fold(0.0f64, f64::max);
        assert!(worst_lat < 0.3, "lateral error {worst_lat}");
        let v_peak = trace.rows.iter().map(|r| r.vx).fold(0.0f64, f64::max);
        assert!(v_peak <= ggv.v_max * 1.01);
    }

    #[test]
    fn clothoid_controller_also_completes() {
        let ggv = cautious_ggv();
        let (line, track) = oval_raceline(&ggv);
        let stack = StackConfig::new(ControllerKind::Clothoid, ggv);
        let trace =
            run_closed_loop(&line, &track, &stack, &PlantConfig::default(), 1, 0).unwrap();
        assert!(trace.crash.is_none(), "crashed at {:?}", trace.crash);
        assert_eq!(trace.laps_completed, 1);
    }

    #[test]
    fn online_replanning_also_completes() {
        let ggv = cautious_ggv();
        let (line, track) = oval_raceline(&ggv);
        let mut stack = StackConfig::new(ControllerKind::PurePursuit, ggv);
        stack.online_replan = true;
        let trace =
            run_closed_loop(&line, &track, &stack, &PlantConfig::default(), 1, 0).unwrap();
        assert!(trace.crash.is_none(), "crashed at {:?}", trace.crash);
        assert_eq!(trace.laps_completed, 1);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let ggv = cautious_ggv();
        let (line, track) = oval_raceline(&ggv);
        let stack = StackConfig::new(ControllerKind::PurePursuit, ggv);
        let a = run_closed_loop(&line, &track, &stack, &PlantConfig::default(), 1, 7).unwrap();
        let b = run_closed_loop(&line, &track, &stack, &PlantConfig::default(), 1, 7).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.lap_times, b.lap_times);
    }

    #[test]
    fn overdriven_envelope_without_replanning_crashes() {
        let base = cautious_ggv();
        let hot = base.scaled(3.5);
        let track = oval_track();
        let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
        let line = profile_raceline(&path, &hot).unwrap();
        let stack = StackConfig::new(ControllerKind::PurePursuit, hot);
        let trace =
            run_closed_loop(&line, &track, &stack, &PlantConfig::default(), 2, 0).unwrap();
        assert!(trace.crash.is_some(), "expected a crash, got {} laps", trace.laps_completed);
        assert!(trace.lap_times.is_empty());
    }

    #[test]
    fn window_time_resampling_matches_closed_forms() {
        // constant speed: time samples sit at d = k v t_s
        let n = 60;
        let rho: Vec<f64> = (0..n).map(|i| 0.01 * i as f64).collect();
        let v = vec![2.0; n];
        let zeros = vec![0.0; n];
        let w = time_sample_window(&rho, &v, &zeros, &zeros, 0.05, 0.05, 10);
        for k in 0..10 {
            let d = 2.0 * 0.05 * k as f64;
            let want = 0.01 * (d / 0.05);
            assert!((w.rho[k] - want).abs() < 1e-9, "k={k}: {} vs {want}", w.rho[k]);
            assert_eq!(w.v[k], 2.0);
        }
        // constant acceleration from v0: distance at time t is closed form
        let v0 = 1.0;
        let a = 0.5;
        let ds = 0.05;
        let vr: Vec<f64> = (0..n).map(|i| (v0 * v0 + 2.0 * a * ds * i as f64).sqrt()).collect();
        let marker: Vec<f64> = (0..n).map(|i| ds * i as f64).collect(); // channel = distance
        let w2 = time_sample_window(&marker, &vr, &zeros, &zeros, ds, 0.05, 10);
        for k in 0..10 {
            let t = 0.05 * k as f64;
            let d = v0 * t + 0.5 * a * t * t;
            assert!((w2.rho[k] - d).abs() < 2e-4, "k={k}: {} vs {d}", w2.rho[k]);
        }
    }

    #[test]
    fn trace_csv_round_trips() {
        let ggv = cautious_ggv();
        let (line, track) = oval_raceline(&ggv);
        let stack = StackConfig::new(ControllerKind::PurePursuit, ggv);
        let trace =
            run_closed_loop(&line, &track, &stack, &PlantConfig::default(), 1, 0).unwrap();
        let text = trace.to_csv_string();
        let back = RunTrace::from_csv_str(&text).unwrap();
        assert_eq!(trace.rows, back.rows);
        assert_eq!(trace.lap_times, back.lap_times);
        assert_eq!(trace.laps_completed, back.laps_completed);
        assert_eq!(trace.tick_rate, back.tick_rate);
        assert_eq!(trace.crash, back.crash);
        assert_eq!(trace.cpu_us_planner, back.cpu_us_planner);
    }
}
