//! Model-structured steering network. The steering command is built from a
//! preview window of reference signals in two stages: a per-sample
//! quasi-steady-state map delta_ss = rho L + Q(v,ax) ay + S(v,ax) ay^2
//! whose coefficients are linear in speed and longitudinal acceleration,
//! and learned velocity-gated linear filters that blend the per-sample
//! values into one command. Gates are fixed triangular memberships forming
//! a partition of unity over speed; filters and the quasi-steady-state
//! coefficients are trained by Adam with exact closed-form gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MsnnError {
    #[error("bad reference window: {0}")]
    BadWindow(&'static str),
    #[error("bad model: {0}")]
    BadModel(&'static str),
    #[error("dataset split is empty")]
    EmptySplit,
    #[error("dataset inconsistent: {0}")]
    BadDataset(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("model file parse: {0}")]
    ModelParse(String),
    #[error("dataset file parse: line {line}: {reason}")]
    DatasetParse { line: usize, reason: String },
    #[error("file io: {0}")]
    Io(#[from] std::io::Error),
}

/// Future reference signals over a preview window of w+1 samples at a
/// fixed period.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub rho: Vec<f64>,
    pub v: Vec<f64>,
    pub ay: Vec<f64>,
    pub ax: Vec<f64>,
}

impl ReferenceWindow {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn validate(&self) -> Result<(), MsnnError> {
        let n = self.rho.len();
        if n == 0 {
            return Err(MsnnError::BadWindow("empty window"));
        }
        if self.v.len() != n || self.ay.len() != n || self.ax.len() != n {
            return Err(MsnnError::BadWindow("channel lengths differ"));
        }
        for j in 0..n {
            if !(self.rho[j].is_finite()
                && self.v[j].is_finite()
                && self.ay[j].is_finite()
                && self.ax[j].is_finite())
            {
                return Err(MsnnError::BadWindow("non-finite entry"));
            }
            if self.v[j] < 0.0 {
                return Err(MsnnError::BadWindow("negative speed"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsnnVariant {
    /// Q and S linear in v and ax, gates over the full speed window.
    Extended,
    /// Constant slope A on ay, gates driven by the current speed only.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsnnModel {
    pub variant: MsnnVariant,
    pub wheelbase: f64,
    pub q0: f64,
    pub qv: f64,
    pub qx: f64,
    pub s0: f64,
    pub sv: f64,
    pub sx: f64,
    /// Baseline slope; unused by the extended variant.
    pub a: f64,
    /// Triangle peak speeds, strictly increasing. Fixed, not trained.
    pub gate_centers: Vec<f64>,
    /// One weight vector of length w+1 per gate channel.
    pub filters: Vec<Vec<f64>>,
}

/// Gate centers uniformly spanning a speed range; one channel collapses
/// to a single always-on gate.
pub fn uniform_gate_centers(n: usize, v_min: f64, v_max: f64) -> Vec<f64> {
    assert!(n >= 1);
    if n == 1 {
        return vec![0.5 * (v_min + v_max)];
    }
    (0..n)
        .map(|i| v_min + (v_max - v_min) * i as f64 / (n - 1) as f64)
        .collect()
}

impl MsnnModel {
    /// Fresh model: small positive understeer prior on the constant
    /// handling coefficient (both variants), uniform filters.
    pub fn new(
        variant: MsnnVariant,
        wheelbase: f64,
        gate_centers: Vec<f64>,
        w: usize,
    ) -> Result<Self, MsnnError> {
        let n = gate_centers.len();
        let m = Self {
            variant,
            wheelbase,
            q0: 0.01,
            qv: 0.0,
            qx: 0.0,
            s0: 0.0,
            sv: 0.0,
            sx: 0.0,
            a: 0.01,
            gate_centers,
            filters: vec![vec![1.0 / (w as f64 + 1.0); w + 1]; n],
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), MsnnError> {
        if !(self.wheelbase > 0.0) {
            return Err(MsnnError::BadModel("wheelbase must be positive"));
        }
        if self.gate_centers.is_empty() {
            return Err(MsnnError::BadModel("needs at least one gate"));
        }
        if self.gate_centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MsnnError::BadModel("gate centers must increase strictly"));
        }
        if self.filters.len() != self.gate_centers.len() {
            return Err(MsnnError::BadModel("one filter per gate required"));
        }
        let w1 = self.filters[0].len();
        if w1 == 0 || self.filters.iter().any(|f| f.len() != w1) {
            return Err(MsnnError::BadModel("filters must share a nonzero length"));
        }
        let finite = self.filters.iter().flatten().all(|x| x.is_finite())
            && [self.q0, self.qv, self.qx, self.s0, self.sv, self.sx, self.a]
                .iter()
                .all(|x| x.is_finite());
        if !finite {
            return Err(MsnnError::BadModel("non-finite parameter"));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.filters[0].len()
    }

    pub fn channels(&self) -> usize {
        self.gate_centers.len()
    }

    /// Triangular memberships at speed v; sums to exactly 1 by
    /// complement construction.
    pub fn gates(&self, v: f64) -> Vec<f64> {
        let c = &self.gate_centers;
        let n = c.len();
        let mut psi = vec![0.0; n];
        if n == 1 || v <= c[0] {
            psi[0] = 1.0;
            if n == 1 {
                return psi;
            }
            if v <= c[0] {
                return psi;
            }
        }
        if v >= c[n - 1] {
            psi = vec![0.0; n];
            psi[n - 1] = 1.0;
            return psi;
        }
        let hi = c.partition_point(|&g| g <= v);
        let (i, j) = (hi - 1, hi);
        let t = (v - c[i]) / (c[j] - c[i]);
        psi[i] = 1.0 - t;
        psi[j] = t;
        psi
    }

    fn head_param_count(&self) -> usize {
        match self.variant {
            MsnnVariant::Extended => 6,
            MsnnVariant::Baseline => 1,
        }
    }

    /// Learnable parameter count (gate centers are hyperparameters).
    pub fn param_count(&self) -> usize {
        self.head_param_count() + self.channels() * self.window_len()
    }

    fn get_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        match self.variant {
            MsnnVariant::Extended => {
                p.extend_from_slice(&[self.q0, self.qv, self.qx, self.s0, self.sv, self.sx])
            }
            MsnnVariant::Baseline => p.push(self.a),
        }
        for f in &self.filters {
            p.extend_from_slice(f);
        }
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.param_count());
        match self.variant {
            MsnnVariant::Extended => {
                self.q0 = p[0];
                self.qv = p[1];
                self.qx = p[2];
                self.s0 = p[3];
                self.sv = p[4];
                self.sx = p[5];
            }
            MsnnVariant::Baseline => {
                self.a = p[0];
            }
        }
        let mut k = self.head_param_count();
        for f in self.filters.iter_mut() {
            let len = f.len();
            f.copy_from_slice(&p[k..k + len]);
            k += len;
        }
    }
}

/// Per-sample quasi-steady-state steering over the window.
pub fn qss_vector(model: &MsnnModel, window: &ReferenceWindow) -> Vec<f64> {
    let l = model.wheelbase;
    (0..window.len())
        .map(|j| {
            let (rho, v, ay, ax) = (window.rho[j], window.v[j], window.ay[j], window.ax[j]);
            match model.variant {
                MsnnVariant::Extended => {
                    let q = model.q0 + model.qv * v + model.qx * ax;
                    let s = model.s0 + model.sv * v + model.sx * ax;
                    rho * l + q * ay + s * ay * ay
                }
                MsnnVariant::Baseline => rho * l + model.a * ay,
            }
        })
        .collect()
}

/// Steering command for one window. If `grad` is given it receives
/// d(output)/d(parameter) in the training parameter layout.
fn forward_with_grad(model: &MsnnModel, win: &ReferenceWindow, mut grad: Option<&mut [f64]>) -> f64 {
    let w1 = model.window_len();
    debug_assert_eq!(win.len(), w1);
    let dss = qss_vector(model, win);
    let n = model.channels();
    let head = model.head_param_count();
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }

    match model.variant {
        MsnnVariant::Extended => {
            let mut pred = 0.0;
            for j in 0..w1 {
                let psi = model.gates(win.v[j]);
                // combined filter weight at sample j across channels
                let mut gj = 0.0;
                for i in 0..n {
                    gj += psi[i] * model.filters[i][j];
                }
                pred += dss[j] * gj;
                if let Some(g) = grad.as_deref_mut() {
                    let ay = win.ay[j];
                    g[0] += ay * gj;
                    g[1] += ay * win.v[j] * gj;
                    g[2] += ay * win.ax[j] * gj;
                    g[3] += ay * ay * gj;
                    g[4] += ay * ay * win.v[j] * gj;
                    g[5] += ay * ay * win.ax[j] * gj;
                    for i in 0..n {
                        g[head + i * w1 + j] = dss[j] * psi[i];
                    }
                }
            }
            pred
        }
        MsnnVariant::Baseline => {
            let psi = model.gates(win.v[0]);
            let mut pred = 0.0;
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..w1 {
                    dot += dss[j] * model.filters[i][j];
                }
                pred += psi[i] * dot;
                if let Some(g) = grad.as_deref_mut() {
                    for j in 0..w1 {
                        g[head + i * w1 + j] = psi[i] * dss[j];
                        g[0] += psi[i] * model.filters[i][j] * win.ay[j];
                    }
                }
            }
            pred
        }
    }
}

pub fn msnn_forward(model: &MsnnModel, window: &ReferenceWindow) -> f64 {
    forward_with_grad(model, window, None)
}

// ── datasets ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteerSample {
    pub window: ReferenceWindow,
    pub delta: f64,
}

/// Chronologically ordered (window, measured steering) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerDataset {
    pub samples: Vec<SteerSample>,
    pub t_s: f64,
    pub split: SplitTag,
}

impl SteerDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<(), MsnnError> {
        if self.samples.is_empty() {
            return Err(MsnnError::EmptySplit);
        }
        let w1 = self.samples[0].window.len();
        for (i, s) in self.samples.iter().enumerate() {
            s.window
                .validate()
                .map_err(|e| MsnnError::BadDataset(format!("sample {i}: {e}")))?;
            if s.window.len() != w1 {
                return Err(MsnnError::BadDataset(format!("sample {i}: window length differs")));
            }
            if !s.delta.is_finite() {
                return Err(MsnnError::BadDataset(format!("sample {i}: non-finite target")));
            }
        }
        Ok(())
    }

    /// Stable content hash (FNV-1a over the raw bit patterns), recorded in
    /// model files so a trained model names its data.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.t_s);
        for s in &self.samples {
            for ch in [&s.window.rho, &s.window.v, &s.window.ay, &s.window.ax] {
                for &x in ch.iter() {
                    eat(x);
                }
            }
            eat(s.delta);
        }
        h
    }

    pub fn to_csv_string(&self) -> String {
        let w1 = if self.samples.is_empty() { 0 } else { self.samples[0].window.len() };
        let mut out = String::new();
        out.push_str(&format!("# w={}\n", w1.saturating_sub(1)));
        out.push_str(&format!("# t_s={}\n", self.t_s));
        out.push_str(&format!(
            "# split={}\n",
            match self.split {
                SplitTag::Train => "train",
                SplitTag::Validation => "validation",
            }
        ));
        let mut header = Vec::new();
        for ch in ["rho", "v", "ay", "ax"] {
            for j in 0..w1 {
                header.push(format!("{ch}_{j}"));
            }
        }
        header.push("delta".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for s in &self.samples {
            let mut row = Vec::with_capacity(4 * w1 + 1);
            for ch in [&s.window.rho, &s.window.v, &s.window.ay, &s.window.ax] {
                for &x in ch.iter() {
                    row.push(format!("{x}"));
                }
            }
            row.push(format!("{}", s.delta));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self, MsnnError> {
        let mut t_s = None;
        let mut split = SplitTag::Train;
        let mut w: Option<usize> = None;
        let mut samples = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("w=") {
                    w = Some(v.parse().map_err(|_| MsnnError::DatasetParse {
                        line: lineno + 1,
                        reason: format!("bad w {v:?}"),
                    })?);
                } else if let Some(v) = rest.strip_prefix("t_s=") {
                    t_s = Some(v.parse().map_err(|_| MsnnError::DatasetParse {
                        line: lineno + 1,
                        reason: format!("bad t_s {v:?}"),
                    })?);
                } else if let Some(v) = rest.strip_prefix("split=") {
                    split = match v {
                        "train" => SplitTag::Train,
                        "validation" => SplitTag::Validation,
                        other => {
                            return Err(MsnnError::DatasetParse {
                                line: lineno + 1,
                                reason: format!("unknown split {other:?}"),
                            })
                        }
                    };
                }
                continue;
            }
            if !saw_header {
                saw_header = true;
                continue;
            }
            let w1 = w.ok_or(MsnnError::DatasetParse {
                line: lineno + 1,
                reason: "missing w header".into(),
            })? + 1;
            let vals: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse()).collect();
            let vals = vals.map_err(|_| MsnnError::DatasetParse {
                line: lineno + 1,
                reason: "bad number".into(),
            })?;
            if vals.len() != 4 * w1 + 1 {
                return Err(MsnnError::DatasetParse {
                    line: lineno + 1,
                    reason: format!("expected {} fields, got {}", 4 * w1 + 1, vals.len()),
                });
            }
            samples.push(SteerSample {
                window: ReferenceWindow {
                    rho: vals[0..w1].to_vec(),
                    v: vals[w1..2 * w1].to_vec(),
                    ay: vals[2 * w1..3 * w1].to_vec(),
                    ax: vals[3 * w1..4 * w1].to_vec(),
                },
                delta: vals[4 * w1],
            });
        }
        let t_s = t_s.ok_or(MsnnError::DatasetParse { line: 0, reason: "missing t_s header".into() })?;
        let ds = SteerDataset { samples, t_s, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self, MsnnError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), MsnnError> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, batch_size: 200, max_epochs: 6000, patience: 400, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub train_rmse: Vec<f64>,
    pub val_rmse: Vec<f64>,
    pub best_epoch: usize,
}

/// Root-mean-square steering error over a batch; fills `grad` with the
/// exact loss gradient when given.
fn batch_rmse_grad(
    model: &MsnnModel,
    samples: &[SteerSample],
    idx: &[usize],
    grad: Option<&mut [f64]>,
    scratch: &mut [f64],
) -> f64 {
    let b = idx.len() as f64;
    let mut sum_sq = 0.0;
    if let Some(g) = &grad {
        debug_assert_eq!(g.len(), scratch.len());
    }
    let mut acc = vec![0.0; scratch.len()];
    for &k in idx {
        let s = &samples[k];
        let pred = forward_with_grad(model, &s.window, Some(scratch));
        let e = pred - s.delta;
        sum_sq += e * e;
        for (a, &d) in acc.iter_mut().zip(scratch.iter()) {
            *a += e * d;
        }
    }
    let rmse = (sum_sq / b).sqrt();
    if let Some(g) = grad {
        if rmse > 1e-15 {
            for (gi, a) in g.iter_mut().zip(acc.iter()) {
                *gi = a / (b * rmse);
            }
        } else {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    rmse
}

fn dataset_rmse(model: &MsnnModel, data: &SteerDataset) -> f64 {
    let mut sum_sq = 0.0;
    for s in &data.samples {
        let e = msnn_forward(model, &s.window) - s.delta;
        sum_sq += e * e;
    }
    (sum_sq / data.len() as f64).sqrt()
}

/// Adam on the RMSE loss with exact gradients, mini-batches shuffled by a
/// seeded generator, early stopping on validation RMSE with best-weights
/// restoration. Bit-reproducible for a fixed seed.
pub fn train(
    model: &MsnnModel,
    train_set: &SteerDataset,
    val_set: &SteerDataset,
    cfg: &TrainConfig,
) -> Result<(MsnnModel, TrainHistory), MsnnError> {
    model.validate()?;
    train_set.validate()?;
    val_set.validate()?;
    if train_set.samples[0].window.len() != model.window_len()
        || val_set.samples[0].window.len() != model.window_len()
    {
        return Err(MsnnError::BadDataset("window length does not match the model".into()));
    }

    let mut m = model.clone();
    let np = m.param_count();
    let mut p = m.get_params();
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut grad = vec![0.0; np];
    let mut scratch = vec![0.0; np];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = TrainHistory { train_rmse: Vec::new(), val_rmse: Vec::new(), best_epoch: 0 };
    let mut best_val = f64::INFINITY;
    let mut best_params = p.clone();
    let mut since_best = 0usize;
    let mut t = 0u64;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let loss = batch_rmse_grad(&m, &train_set.samples, chunk, Some(&mut grad), &mut scratch);
            if !loss.is_finite() {
                return Err(MsnnError::NanLoss { epoch, batch: bi });
            }
            t += 1;
            let bc1 = 1.0 - b1.powi(t as i32);
            let bc2 = 1.0 - b2.powi(t as i32);
            for i in 0..np {
                m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
                m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
                p[i] -= cfg.learning_rate * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + eps);
            }
            m.set_params(&p);
        }
        let tr = dataset_rmse(&m, train_set);
        let va = dataset_rmse(&m, val_set);
        history.train_rmse.push(tr);
        history.val_rmse.push(va);
        if va < best_val {
            best_val = va;
            best_params = p.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    m.set_params(&best_params);
    Ok((m, history))
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub rmse: f64,
    /// Residual variance over ground-truth variance; NaN when the targets
    /// have zero variance (see `degenerate`).
    pub fvu: f64,
    pub degenerate: bool,
}

pub fn evaluate(model: &MsnnModel, data: &SteerDataset) -> Result<EvalMetrics, MsnnError> {
    data.validate()?;
    let n = data.len() as f64;
    let mean = data.samples.iter().map(|s| s.delta).sum::<f64>() / n;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for s in &data.samples {
        let e = msnn_forward(model, &s.window) - s.delta;
        sse += e * e;
        sst += (s.delta - mean) * (s.delta - mean);
    }
    let rmse = (sse / n).sqrt();
    if sst == 0.0 {
        return Ok(EvalMetrics { rmse, fvu: f64::NAN, degenerate: true });
    }
    Ok(EvalMetrics { rmse, fvu: sse / sst, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aic {
    pub value: f64,
    /// Zero prediction error makes ln(MSE) unbounded below.
    pub degenerate: bool,
}

/// N ln(MSE) + 2k with k the learnable parameter count.
pub fn aic(model: &MsnnModel, data: &SteerDataset) -> Result<Aic, MsnnError> {
    data.validate()?;
    let n = data.len() as f64;
    let mse = {
        let mut sse = 0.0;
        for s in &data.samples {
            let e = msnn_forward(model, &s.window) - s.delta;
            sse += e * e;
        }
        sse / n
    };
    let k = model.param_count() as f64;
    if mse == 0.0 {
        return Ok(Aic { value: f64::NEG_INFINITY, degenerate: true });
    }
    Ok(Aic { value: n * mse.ln() + 2.0 * k, degenerate: false })
}

// ── interpretation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    pub t_s: f64,
    /// j-th entry applies to the reference j*t_s ahead.
    pub lookahead_times: Vec<f64>,
    pub channels: Vec<Vec<f64>>,
    /// Argmax of the channel-mean weight curve; ties break low.
    pub peak_index: usize,
    pub implied_delay: f64,
    pub flat: bool,
}

/// Reads the trained filters as an impulse response over preview time:
/// the peak marks how far ahead the network looks, i.e. the actuation
/// delay it has learned to anticipate.
pub fn interpret_weights(model: &MsnnModel, t_s: f64) -> WeightReport {
    let w1 = model.window_len();
    let n = model.channels() as f64;
    let mean: Vec<f64> = (0..w1)
        .map(|j| model.filters.iter().map(|f| f[j]).sum::<f64>() / n)
        .collect();
    let mut peak = 0;
    for j in 1..w1 {
        if mean[j] > mean[peak] {
            peak = j;
        }
    }
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    WeightReport {
        t_s,
        lookahead_times: (0..w1).map(|j| j as f64 * t_s).collect(),
        channels: model.filters.clone(),
        peak_index: peak,
        implied_delay: peak as f64 * t_s,
        flat: hi - lo < 1e-12,
    }
}

// ── model files ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub seed: u64,
    pub dataset_hash: String,
    pub best_epoch: usize,
    pub val_rmse: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    model: MsnnModel,
    provenance: ModelProvenance,
}

pub fn model_to_toml(model: &MsnnModel, prov: &ModelProvenance) -> String {
    toml::to_string_pretty(&ModelFile { model: model.clone(), provenance: prov.clone() })
        .expect("model serializes")
}

pub fn model_from_toml(text: &str) -> Result<(MsnnModel, ModelProvenance), MsnnError> {
    let f: ModelFile = toml::from_str(text).map_err(|e| MsnnError::ModelParse(e.to_string()))?;
    f.model.validate()?;
    Ok((f.model, f.provenance))
}

pub fn write_model(
    path: &std::path::Path,
    model: &MsnnModel,
    prov: &ModelProvenance,
) -> Result<(), MsnnError> {
    std::fs::write(path, model_to_toml(model, prov))?;
    Ok(())
}

pub fn read_model(path: &std::path::Path) -> Result<(MsnnModel, ModelProvenance), MsnnError> {
    model_from_toml(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_window(rng: &mut ChaCha8Rng, w1: usize) -> ReferenceWindow {
        ReferenceWindow {
            rho: (0..w1).map(|_| rng.gen_range(-0.6..0.6)).collect(),
            v: (0..w1).map(|_| rng.gen_range(0.5..4.0)).collect(),
            ay: (0..w1).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            ax: (0..w1).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        }
    }

    fn random_model(rng: &mut ChaCha8Rng, variant: MsnnVariant, n: usize, w1: usize) -> MsnnModel {
        let mut m = MsnnModel::new(variant, 0.33, uniform_gate_centers(n, 0.5, 4.0), w1 - 1).unwrap();
        m.q0 = rng.gen_range(-0.02..0.02);
        m.qv = rng.gen_range(-0.01..0.01);
        m.qx = rng.gen_range(-0.01..0.01);
        m.s0 = rng.gen_range(-0.005..0.005);
        m.sv = rng.gen_range(-0.002..0.002);
        m.sx = rng.gen_range(-0.002..0.002);
        m.a = rng.gen_range(-0.02..0.02);
        for f in m.filters.iter_mut() {
            for x in f.iter_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
        m
    }

    #[test]
    fn gates_form_a_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 2, 3, 5] {
            let m = MsnnModel::new(MsnnVariant::Extended, 0.33, uniform_gate_centers(n, 0.8, 4.2), 4)
                .unwrap();
            for _ in 0..10_000 / n {
                let v = rng.gen_range(-1.0..6.0);
                let psi = m.gates(v);
                let sum: f64 = psi.iter().sum();
                assert!((sum - 1.0).abs() < 1e-15, "n={n} v={v}: sum {sum}");
                assert!(psi.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn qss_closed_form_examples() {
        let mut m = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 2).unwrap();
        m.q0 = 0.7;
        m.s0 = -0.3;
        let zero = ReferenceWindow {
            rho: vec![0.0; 3],
            v: vec![2.0; 3],
            ay: vec![0.0; 3],
            ax: vec![1.0; 3],
        };
        assert!(qss_vector(&m, &zero).iter().all(|&d| d == 0.0));

        let mut m2 = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 0).unwrap();
        m2.q0 = 0.01;
        let win = ReferenceWindow { rho: vec![1.0], v: vec![2.0], ay: vec![3.0], ax: vec![0.0] };
        let d = qss_vector(&m2, &win)[0];
        assert!((d - 0.36).abs() < 1e-12, "{d}");
    }

    // tiny expression tree so the oracle arithmetic takes a different path
    enum Expr {
        V(&'static str),
        Add(Box<Expr>, Box<Expr>),
        Mul(Box<Expr>, Box<Expr>),
    }

    fn ev(e: &Expr, env: &std::collections::HashMap<&str, f64>) -> f64 {
        match e {
            Expr::V(n) => env[n],
            Expr::Add(a, b) => ev(a, env) + ev(b, env),
            Expr::Mul(a, b) => ev(a, env) * ev(b, env),
        }
    }

    #[test]
    fn qss_matches_expression_tree_oracle() {
        use Expr::*;
        let lin = |c0: &'static str, c1: &'static str, c2: &'static str| {
            Add(
                Box::new(V(c0)),
                Box::new(Add(
                    Box::new(Mul(Box::new(V(c1)), Box::new(V("v")))),
                    Box::new(Mul(Box::new(V(c2)), Box::new(V("ax")))),
                )),
            )
        };
        let formula = Add(
            Box::new(Mul(Box::new(V("rho")), Box::new(V("L")))),
            Box::new(Add(
                Box::new(Mul(Box::new(lin("q0", "qv", "qx")), Box::new(V("ay")))),
                Box::new(Mul(
                    Box::new(lin("s0", "sv", "sx")),
                    Box::new(Mul(Box::new(V("ay")), Box::new(V("ay")))),
                )),
            )),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let m = random_model(&mut rng, MsnnVariant::Extended, 2, 6);
            let win = random_window(&mut rng, 6);
            let dss = qss_vector(&m, &win);
            for j in 0..6 {
                let env: std::collections::HashMap<&str, f64> = [
                    ("rho", win.rho[j]),
                    ("v", win.v[j]),
                    ("ay", win.ay[j]),
                    ("ax", win.ax[j]),
                    ("L", m.wheelbase),
                    ("q0", m.q0),
                    ("qv", m.qv),
                    ("qx", m.qx),
                    ("s0", m.s0),
                    ("sv", m.sv),
                    ("sx", m.sx),
                ]
                .into();
                let want = ev(&formula, &env);
                assert!((dss[j] - want).abs() < 1e-12, "{} vs {want}", dss[j]);
            }
        }
    }

    #[test]
    fn forward_linearity_and_zero_filters() {
        let mut m = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 4).unwrap();
        // constant qss: rho = c / L, ay = 0
        let c = 0.25;
        let win = ReferenceWindow {
            rho: vec![c / 0.33; 5],
            v: vec![2.0; 5],
            ay: vec![0.0; 5],
            ax: vec![0.0; 5],
        };
        for f in m.filters.iter_mut() {
            f.copy_from_slice(&[0.1, 0.2, 0.3, 0.15, 0.25]);
        }
        let total: f64 = m.filters[0].iter().sum();
        assert!((msnn_forward(&m, &win) - c * total).abs() < 1e-12);

        for f in m.filters.iter_mut() {
            f.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(msnn_forward(&m, &random_window(&mut rng, 5)), 0.0);
    }

    #[test]
    fn forward_matches_bruteforce_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for variant in [MsnnVariant::Extended, MsnnVariant::Baseline] {
            for _ in 0..30 {
                let m = random_model(&mut rng, variant, 2, 8);
                let win = random_window(&mut rng, 8);
                let dss = qss_vector(&m, &win);
                let mut want = 0.0;
                for i in 0..m.channels() {
                    for j in 0..8 {
                        let gate_v = match variant {
                            MsnnVariant::Extended => win.v[j],
                            MsnnVariant::Baseline => win.v[0],
                        };
                        want += dss[j] * m.gates(gate_v)[i] * m.filters[i][j];
                    }
                }
                let got = msnn_forward(&m, &win);
                assert!((got - want).abs() < 1e-12, "{variant:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn one_hot_filter_recovers_the_hot_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = random_model(&mut rng, MsnnVariant::Extended, 3, 10);
        for f in m.filters.iter_mut() {
            f.iter_mut().for_each(|x| *x = 0.0);
            f[4] = 1.0;
        }
        let v = 2.2;
        let rho = 0.4;
        let win = ReferenceWindow {
            rho: vec![rho; 10],
            v: vec![v; 10],
            ay: vec![v * v * rho; 10],
            ax: vec![0.0; 10],
        };
        // gates sum to one, so the one-hot filters pick out sample 4
        let want = qss_vector(&m, &win)[4];
        assert_eq!(msnn_forward(&m, &win), want);
    }

    #[test]
    fn forward_is_quadratic_in_lateral_acceleration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(&mut rng, MsnnVariant::Extended, 2, 6);
        let base = random_window(&mut rng, 6);
        let at = |t: f64| {
            let mut w = base.clone();
            w.ay.iter_mut().for_each(|a| *a *= t);
            msnn_forward(&m, &w)
        };
        let (f0, f1, f2) = (at(0.0), at(1.0), at(2.0));
        // quadratic through t = 0, 1, 2 must predict t = 3 exactly
        let c = f0;
        let b = (4.0 * f1 - f2 - 3.0 * f0) / 2.0;
        let a = (f2 - 2.0 * f1 + f0) / 2.0;
        let predict3 = a * 9.0 + b * 3.0 + c;
        assert!((at(3.0) - predict3).abs() < 1e-9, "{} vs {predict3}", at(3.0));
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let variant = if trial % 2 == 0 { MsnnVariant::Extended } else { MsnnVariant::Baseline };
            let mut m = random_model(&mut rng, variant, 2, 6);
            let samples: Vec<SteerSample> = (0..4)
                .map(|_| SteerSample {
                    window: random_window(&mut rng, 6),
                    delta: rng.gen_range(-0.4..0.4),
                })
                .collect();
            let idx: Vec<usize> = (0..samples.len()).collect();
            let np = m.param_count();
            let mut grad = vec![0.0; np];
            let mut scratch = vec![0.0; np];
            batch_rmse_grad(&m, &samples, &idx, Some(&mut grad), &mut scratch);

            let mut p = m.get_params();
            for i in 0..np {
                let eps = 1e-6;
                let orig = p[i];
                p[i] = orig + eps;
                m.set_params(&p);
                let up = batch_rmse_grad(&m, &samples, &idx, None, &mut scratch);
                p[i] = orig - eps;
                m.set_params(&p);
                let dn = batch_rmse_grad(&m, &samples, &idx, None, &mut scratch);
                p[i] = orig;
                m.set_params(&p);
                let fd = (up - dn) / (2.0 * eps);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    fn synthetic_sets(
        rng: &mut ChaCha8Rng,
        teacher: &MsnnModel,
        n_train: usize,
        n_val: usize,
    ) -> (SteerDataset, SteerDataset) {
        let mut gen = |n: usize, split| SteerDataset {
            samples: (0..n)
                .map(|_| {
                    let w = random_window(rng, teacher.window_len());
                    SteerSample { delta: msnn_forward(teacher, &w), window: w }
                })
                .collect(),
            t_s: 0.05,
            split,
        };
        (gen(n_train, SplitTag::Train), gen(n_val, SplitTag::Validation))
    }

    #[test]
    fn training_recovers_a_realizable_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut teacher = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 9).unwrap();
        teacher.q0 = 0.013;
        teacher.qv = 0.002;
        teacher.qx = -0.001;
        teacher.s0 = 4e-4;
        for (j, x) in teacher.filters[0].iter_mut().enumerate() {
            *x = 0.05 + if j == 4 { 0.6 } else { 0.0 };
        }
        let (train_set, val_set) = synthetic_sets(&mut rng, &teacher, 200, 80);
        let init = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 9).unwrap();
        let cfg = TrainConfig::default();
        let (trained, hist) = train(&init, &train_set, &val_set, &cfg).unwrap();
        let m = evaluate(&trained, &val_set).unwrap();
        assert!(m.rmse < 1e-4, "validation rmse {}", m.rmse);
        // restoration consistency: reported best epoch is the history min
        let best = hist.val_rmse.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((hist.val_rmse[hist.best_epoch] - best).abs() < 1e-15);
        assert!((m.rmse - best).abs() < 1e-12, "{} vs {}", m.rmse, best);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let teacher = random_model(&mut rng, MsnnVariant::Extended, 1, 6);
        let (train_set, val_set) = synthetic_sets(&mut rng, &teacher, 90, 30);
        let init = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 5).unwrap();
        let cfg = TrainConfig { max_epochs: 40, batch_size: 32, seed: 4242, ..Default::default() };
        let (a, ha) = train(&init, &train_set, &val_set, &cfg).unwrap();
        let (b, hb) = train(&init, &train_set, &val_set, &cfg).unwrap();
        let bits = |m: &MsnnModel| m.get_params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(ha, hb);
    }

    #[test]
    fn evaluate_and_aic_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = random_model(&mut rng, MsnnVariant::Extended, 1, 4);
        // perfect predictor
        let (ds, _) = synthetic_sets(&mut rng, &model, 20, 1);
        let m = evaluate(&model, &ds).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.fvu, 0.0);
        let a = aic(&model, &ds).unwrap();
        assert!(a.degenerate && a.value == f64::NEG_INFINITY);

        // zero predictor on targets symmetric around zero: fvu = 1
        let mut zero = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 3).unwrap();
        zero.q0 = 0.0;
        for f in zero.filters.iter_mut() {
            f.iter_mut().for_each(|x| *x = 0.0);
        }
        let w = random_window(&mut rng, 4);
        let sym = SteerDataset {
            samples: vec![
                SteerSample { window: w.clone(), delta: -0.2 },
                SteerSample { window: w.clone(), delta: 0.2 },
            ],
            t_s: 0.05,
            split: SplitTag::Validation,
        };
        let m2 = evaluate(&zero, &sym).unwrap();
        assert!((m2.fvu - 1.0).abs() < 1e-12);

        // zero-variance targets flagged
        let flat = SteerDataset {
            samples: vec![
                SteerSample { window: w.clone(), delta: 0.1 },
                SteerSample { window: w.clone(), delta: 0.1 },
            ],
            t_s: 0.05,
            split: SplitTag::Validation,
        };
        let m3 = evaluate(&zero, &flat).unwrap();
        assert!(m3.degenerate && m3.fvu.is_nan());

        // aic deltas: +2 per extra parameter at equal mse, -N ln 2 per mse halving
        let ext = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 3).unwrap();
        let base = MsnnModel::new(MsnnVariant::Baseline, 0.33, vec![2.0], 3).unwrap();
        let mk = |d: f64| SteerDataset {
            samples: (0..10)
                .map(|_| SteerSample {
                    window: ReferenceWindow {
                        rho: vec![0.0; 4],
                        v: vec![1.0; 4],
                        ay: vec![0.0; 4],
                        ax: vec![0.0; 4],
                    },
                    delta: d,
                })
                .collect(),
            t_s: 0.05,
            split: SplitTag::Train,
        };
        // both models predict 0 on these windows (ay = rho = 0)
        let a_ext = aic(&ext, &mk(0.3)).unwrap().value;
        let a_base = aic(&base, &mk(0.3)).unwrap().value;
        let dk = (ext.param_count() - base.param_count()) as f64;
        assert!((a_ext - a_base - 2.0 * dk).abs() < 1e-9);
        let half = aic(&ext, &mk(0.3 / 2f64.sqrt())).unwrap().value;
        assert!((a_ext - half - 10.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn weight_interpretation_examples() {
        let mut m = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 9).unwrap();
        m.filters[0].iter_mut().for_each(|x| *x = 0.0);
        m.filters[0][4] = 1.0;
        let r = interpret_weights(&m, 0.05);
        assert_eq!(r.peak_index, 4);
        assert!((r.implied_delay - 0.2).abs() < 1e-12);
        assert!(!r.flat);

        let u = MsnnModel::new(MsnnVariant::Extended, 0.33, vec![2.0], 9).unwrap();
        let ru = interpret_weights(&u, 0.05);
        assert_eq!(ru.peak_index, 0, "ties break to the smallest index");
        assert!(ru.flat);
    }

    #[test]
    fn model_and_dataset_files_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let m = random_model(&mut rng, MsnnVariant::Extended, 2, 7);
        let prov = ModelProvenance {
            seed: 7,
            dataset_hash: format!("{:016x}", 0xdeadbeefu64),
            best_epoch: 123,
            val_rmse: 0.0123,
        };
        let text = model_to_toml(&m, &prov);
        let (back, pback) = model_from_toml(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(prov, pback);

        let teacher = random_model(&mut rng, MsnnVariant::Baseline, 1, 5);
        let (ds, _) = synthetic_sets(&mut rng, &teacher, 12, 1);
        let csv = ds.to_csv_string();
        let dback = SteerDataset::from_csv_str(&csv).unwrap();
        assert_eq!(ds, dback);
        assert_eq!(ds.content_hash(), dback.content_hash());
    }
}
