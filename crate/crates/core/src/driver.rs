//! Desk-scale experiment drivers: precision sweeps, scripted lead-lag
//! trajectories and matched control-vs-intervention runs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{diagnose, records, DiagnosticsConfig, DiagnosticsError, DiagnosticsRecord};
use crate::earlywarning::{analyze, EarlyWarningError, LeadLagReport, SpikeConfig, TimeSeries};
use crate::linalg::Matrix;
use crate::mitigation::{maybe_bump, restore, EpsBumpConfig, EpsBumpEvent};
use crate::model::{forward_dual, init_params, ln_rows, random_input, DualTrace, ModelConfig, ModelError, Params, Tap};
use crate::precision::{Context, FpFormat, PrecisionSpec};
use crate::stats::{summarize, PairedSample, RegressionSummary, StatsError};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    EarlyWarning(#[from] EarlyWarningError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("scenario construction failed: {0}")]
    Scenario(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DriverError + '_ {
    move |source| DriverError::Io { path: path.to_path_buf(), source }
}

/// SplitMix64 finalizer, used to derive independent substream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the substream named by `parts` under `root`.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(root), |acc, &p| mix(acc ^ mix(p)))
}

const STREAM_MODEL: u64 = 1;
const STREAM_INPUT: u64 = 2;
const STREAM_DRIFT: u64 = 3;
const STREAM_TARGET: u64 = 4;
const STREAM_EVENTS: u64 = 5;
const STREAM_PERM: u64 = 6;

/// Linear-interpolated quantile, `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Ordered parallel map over at most `jobs` threads.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    out.into_inner().expect("result lock").into_iter().map(|r| r.expect("every item mapped")).collect()
}

/// Adds `scale·N(0, 1/fan_in)` to every weight matrix.
pub fn drift_params(params: &mut Params, scale: f64, rng: &mut ChaCha8Rng) {
    if scale == 0.0 {
        return;
    }
    for layer in &mut params.layers {
        for w in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v, &mut layer.w_o, &mut layer.w1, &mut layer.w2] {
            let s = scale / (w.rows() as f64).sqrt();
            for v in w.as_mut_slice() {
                let z: f64 = StandardNormal.sample(rng);
                *v += s * z;
            }
        }
    }
}

/// Mean squared difference between the final reference block output and a
/// fixed target.
pub fn loss_proxy(trace: &DualTrace, target: &Matrix) -> f64 {
    let out = &trace.reference.last().expect("nonempty model").block;
    out.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / out.as_slice().len() as f64
}

// ---------------------------------------------------------------- configs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Exp1,
    Exp2,
    Exp3,
    Diag,
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exp1" => Ok(Self::Exp1),
            "exp2" => Ok(Self::Exp2),
            "exp3" => Ok(Self::Exp3),
            "diag" => Ok(Self::Diag),
            other => Err(format!("unknown experiment '{other}'")),
        }
    }
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exp1 => "exp1",
            Self::Exp2 => "exp2",
            Self::Exp3 => "exp3",
            Self::Diag => "diag",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub widths: Vec<usize>,
    pub precisions: Vec<PrecisionSpec>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Trailing fraction of steps summarized per config.
    pub tail_fraction: f64,
    pub tail_quantile: f64,
    pub tap: Tap,
    pub drift_scale: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64],
            precisions: vec![PrecisionSpec::native(FpFormat::Bf16), PrecisionSpec::native(FpFormat::Fp16)],
            seeds: (0..5).collect(),
            steps: 20,
            tail_fraction: 0.25,
            tail_quantile: 0.95,
            tap: Tap::Block,
            drift_scale: 0.01,
        }
    }
}

impl SweepConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.widths.is_empty() {
            v.push("sweep.widths must be nonempty".into());
        }
        if self.precisions.is_empty() {
            v.push("sweep.precisions must be nonempty".into());
        }
        if self.seeds.is_empty() {
            v.push("sweep.seeds must be nonempty".into());
        }
        if self.steps == 0 {
            v.push("sweep.steps must be positive".into());
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            v.push(format!("sweep.tail_fraction must lie in (0,1], got {}", self.tail_fraction));
        }
        if !(0.0..=1.0).contains(&self.tail_quantile) {
            v.push(format!("sweep.tail_quantile must lie in [0,1], got {}", self.tail_quantile));
        }
        if !(self.drift_scale >= 0.0) {
            v.push("sweep.drift_scale must be nonnegative".into());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    Drift,
    ScriptedTie,
}

/// Weight path of an Exp-2 run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trajectory {
    pub mode: TrajectoryMode,
    /// Per-step random-walk scale, relative to the init scale.
    pub drift_scale: f64,
    /// Primary tie event.
    pub tie_step: usize,
    /// Width in steps of each tie.
    pub tie_sharpness: f64,
    /// Extra ties at seeded, irregular steps.
    pub aux_ties: usize,
    pub min_separation: usize,
    /// Delay between a tie and its injected mismatch spike.
    pub mismatch_lag: usize,
    /// Peak amplification of the injected value-conditioning degradation.
    pub mismatch_gain: f64,
    /// Score gap between the two planted logits away from ties.
    pub gap_max: f64,
    /// Lead of the planted logits over the rest of their row.
    pub margin: f64,
    pub layer: usize,
    pub head: usize,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            mode: TrajectoryMode::ScriptedTie,
            drift_scale: 0.002,
            tie_step: 97,
            tie_sharpness: 4.0,
            aux_ties: 3,
            min_separation: 30,
            mismatch_lag: 16,
            mismatch_gain: 50.0,
            gap_max: 12.0,
            margin: 8.0,
            layer: 0,
            head: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp2Config {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub precision: PrecisionSpec,
    pub trajectory: Trajectory,
}

impl Default for Exp2Config {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            steps: 195,
            precision: PrecisionSpec::native(FpFormat::Fp16),
            trajectory: Trajectory::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp3Config {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub tail_steps: usize,
    pub precision: PrecisionSpec,
    pub rho_star: Vec<f64>,
    pub eps_max: Vec<f64>,
    /// Standard deviation of the input tokens.
    pub input_scale: f64,
    /// Overrides of the model's `ln_eps` and `branch_gain`.
    pub ln_eps: Option<f64>,
    pub branch_gain: Option<f64>,
    pub drift_scale: f64,
    /// Runs the intervention arm with the policy switched off.
    pub disable_policy: bool,
}

impl Default for Exp3Config {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            steps: 60,
            tail_steps: 50,
            precision: PrecisionSpec::native(FpFormat::Fp16),
            rho_star: EpsBumpConfig::RHO_STAR_GRID.to_vec(),
            eps_max: EpsBumpConfig::EPS_MAX_GRID.to_vec(),
            input_scale: 1e-3,
            ln_eps: Some(1e-7),
            branch_gain: Some(1e-3),
            drift_scale: 0.002,
            disable_policy: false,
        }
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub root_seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub sweep: SweepConfig,
    pub exp2: Exp2Config,
    pub exp3: Exp3Config,
    pub earlywarning: SpikeConfig,
    pub mitigation: EpsBumpConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Diag,
            root_seed: 0,
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            sweep: SweepConfig::default(),
            exp2: Exp2Config::default(),
            exp3: Exp3Config::default(),
            earlywarning: SpikeConfig::default(),
            mitigation: EpsBumpConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Every semantic violation, each prefixed with its dotted key path.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.model.violations().into_iter().map(|m| format!("model.{m}")).collect();
        v.extend(self.sweep.violations());
        for &w in &self.sweep.widths {
            if w == 0 || w % self.model.n_heads.max(1) != 0 {
                v.push(format!("sweep.widths: {w} must be a positive multiple of model.n_heads"));
            }
        }
        v.extend(self.earlywarning.violations());
        v.extend(self.mitigation.violations());
        let e2 = &self.exp2;
        let t = &e2.trajectory;
        if e2.seeds.is_empty() {
            v.push("exp2.seeds must be nonempty".into());
        }
        let need = 2 * self.earlywarning.max_lag + self.earlywarning.window;
        if e2.steps < need {
            v.push(format!("exp2.steps ({}) must be at least 2*max_lag + window = {need}", e2.steps));
        }
        if t.mode == TrajectoryMode::ScriptedTie {
            let ml = self.earlywarning.max_lag;
            if t.tie_step < ml || t.tie_step + ml >= e2.steps {
                v.push(format!("exp2.trajectory.tie_step ({}) must leave max_lag ({ml}) steps on each side", t.tie_step));
            }
            if t.layer >= self.model.depth {
                v.push(format!("exp2.trajectory.layer ({}) must be below model.depth", t.layer));
            }
            if t.head >= self.model.n_heads {
                v.push(format!("exp2.trajectory.head ({}) must be below model.n_heads", t.head));
            }
            if self.model.seq_len > self.model.d_model {
                v.push("exp2 scripted ties need model.seq_len <= model.d_model".into());
            }
            if self.model.seq_len < 3 {
                v.push("exp2 scripted ties need model.seq_len >= 3".into());
            }
            if !(t.tie_sharpness > 0.0) {
                v.push("exp2.trajectory.tie_sharpness must be positive".into());
            }
            if !(t.mismatch_gain >= 0.0) {
                v.push("exp2.trajectory.mismatch_gain must be nonnegative".into());
            }
        }
        let e3 = &self.exp3;
        if e3.seeds.is_empty() {
            v.push("exp3.seeds must be nonempty".into());
        }
        if e3.rho_star.is_empty() || e3.eps_max.is_empty() {
            v.push("exp3.rho_star and exp3.eps_max must be nonempty".into());
        }
        for &r in &e3.rho_star {
            if !(r > 0.0 && r < 1.0) {
                v.push(format!("exp3.rho_star: {r} must lie in (0,1)"));
            }
        }
        for &c in &e3.eps_max {
            if !(c >= self.mitigation.eps_min) {
                v.push(format!("exp3.eps_max: {c} must be at least mitigation.eps_min ({})", self.mitigation.eps_min));
            }
        }
        if e3.tail_steps == 0 || e3.tail_steps > e3.steps {
            v.push(format!("exp3.tail_steps ({}) must lie in 1..=exp3.steps ({})", e3.tail_steps, e3.steps));
        }
        if !(e3.input_scale > 0.0) {
            v.push("exp3.input_scale must be positive".into());
        }
        if let Some(e) = e3.ln_eps {
            if !(e > 0.0) {
                v.push("exp3.ln_eps must be positive".into());
            }
        }
        if let Some(g) = e3.branch_gain {
            if !(g > 0.0) {
                v.push("exp3.branch_gain must be positive".into());
            }
        }
        if !(self.diagnostics.ridge >= 0.0) {
            v.push("diagnostics.ridge must be nonnegative".into());
        }
        if self.diagnostics.power_iter.max_iters == 0 {
            v.push("diagnostics.power_iter.max_iters must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(DriverError::Invalid(v))
        }
    }
}

// ---------------------------------------------------------------- exp1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1StepRow {
    pub seed: u64,
    pub width: usize,
    pub precision: String,
    pub step: usize,
    pub mismatch: f64,
    pub predictor: f64,
    pub predictor_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1ConfigRow {
    pub seed: u64,
    pub width: usize,
    pub precision: String,
    pub eps: f64,
    pub predictor: f64,
    pub predictor_eps: f64,
    pub tail_mismatch: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exp1Output {
    pub steps: Vec<Exp1StepRow>,
    pub configs: Vec<Exp1ConfigRow>,
    pub summaries: Vec<RegressionSummary>,
    pub records: Vec<DiagnosticsRecord>,
    /// Why regressions were skipped, if they were.
    pub skipped: Option<String>,
}

impl Exp1Output {
    pub fn summary(&self, name: &str) -> Option<&RegressionSummary> {
        self.summaries.iter().find(|s| s.proxy_name == name)
    }
}

fn width_config(base: &ModelConfig, width: usize, seed: u64) -> ModelConfig {
    let ffn = (base.ffn_hidden * width).div_ceil(base.d_model).max(1);
    ModelConfig { d_model: width, ffn_hidden: ffn, seed, ..base.clone() }
}

struct Exp1Cell {
    steps: Vec<Exp1StepRow>,
    configs: Vec<Exp1ConfigRow>,
    records: Vec<DiagnosticsRecord>,
}

fn exp1_cell(cfg: &RunConfig, seed: u64, width: usize) -> Result<Exp1Cell, DriverError> {
    let sw = &cfg.sweep;
    let root = cfg.root_seed;
    let w = width as u64;
    let mc = width_config(&cfg.model, width, derive_seed(root, &[STREAM_MODEL, seed, w]));
    let mut params = init_params(&mc)?;
    let x0 = random_input(mc.seq_len, width, derive_seed(root, &[STREAM_INPUT, seed, w]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root, &[STREAM_DRIFT, seed, w]));
    let n_prec = sw.precisions.len();
    let mut series: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); n_prec];
    let mut steps = Vec::new();
    let mut recs = Vec::new();
    for step in 0..sw.steps {
        let traces = sw
            .precisions
            .iter()
            .map(|p| forward_dual(&params, &x0, p))
            .collect::<Result<Vec<_>, _>>()?;
        let diag = diagnose(&params, &traces[0], &cfg.diagnostics, false)?;
        recs.extend(records(step, &diag, &traces[0]));
        for (k, (p, t)) in sw.precisions.iter().zip(&traces).enumerate() {
            let eps = p.effective_eps(Context::General);
            let mm = t.final_mismatch(sw.tap);
            series[k].0.push(diag.predictor);
            series[k].1.push(mm);
            steps.push(Exp1StepRow {
                seed,
                width,
                precision: p.label(),
                step,
                mismatch: mm,
                predictor: diag.predictor,
                predictor_eps: diag.predictor * eps,
            });
        }
        drift_params(&mut params, sw.drift_scale, &mut rng);
    }
    let tail_len = ((sw.steps as f64 * sw.tail_fraction).ceil() as usize).clamp(1, sw.steps);
    let configs = sw
        .precisions
        .iter()
        .zip(&series)
        .map(|(p, (pred, mm))| {
            let eps = p.effective_eps(Context::General);
            let from = sw.steps - tail_len;
            let predictor = mean(&pred[from..]);
            Exp1ConfigRow {
                seed,
                width,
                precision: p.label(),
                eps,
                predictor,
                predictor_eps: predictor * eps,
                tail_mismatch: quantile(&mm[from..], sw.tail_quantile),
            }
        })
        .collect();
    Ok(Exp1Cell { steps, configs, records: recs })
}

/// Exp-1: per (seed, width, precision) tails of the forward mismatch against
/// the combined predictor, raw and ε-scaled.
pub fn run_exp1(cfg: &RunConfig, jobs: usize) -> Result<Exp1Output, DriverError> {
    let sw = &cfg.sweep;
    let cells: Vec<(u64, usize)> = sw.seeds.iter().flat_map(|&s| sw.widths.iter().map(move |&w| (s, w))).collect();
    let results = par_map(&cells, jobs, |&(s, w)| exp1_cell(cfg, s, w));
    let mut out = Exp1Output { steps: Vec::new(), configs: Vec::new(), summaries: Vec::new(), records: Vec::new(), skipped: None };
    for r in results {
        let cell = r?;
        out.steps.extend(cell.steps);
        out.configs.extend(cell.configs);
        out.records.extend(cell.records);
    }
    if out.configs.iter().all(|c| c.tail_mismatch <= 0.0) {
        let reason = "all tail mismatches are zero (reference-only sweep); regressions skipped".to_string();
        log::warn!("{reason}");
        out.skipped = Some(reason);
        return Ok(out);
    }
    let labels: Vec<String> = out.configs.iter().map(|c| format!("{}/{}/{}", c.seed, c.width, c.precision)).collect();
    let y: Vec<f64> = out.configs.iter().map(|c| c.tail_mismatch).collect();
    let raw = PairedSample::labeled(out.configs.iter().map(|c| c.predictor).collect(), y.clone(), labels.clone())?;
    let scaled = PairedSample::labeled(out.configs.iter().map(|c| c.predictor_eps).collect(), y, labels)?;
    out.summaries.push(summarize("predictor", &raw)?);
    out.summaries.push(summarize("predictor_eps", &scaled)?);
    if sw.precisions.len() > 1 {
        for p in &sw.precisions {
            let label = p.label();
            let rows: Vec<&Exp1ConfigRow> = out.configs.iter().filter(|c| c.precision == label).collect();
            if rows.len() < crate::stats::MIN_SAMPLE || rows.iter().all(|c| c.tail_mismatch <= 0.0) {
                continue;
            }
            let s = PairedSample::new(rows.iter().map(|c| c.predictor).collect(), rows.iter().map(|c| c.tail_mismatch).collect())?;
            out.summaries.push(summarize(&format!("predictor@{label}"), &s)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- exp2

/// Tie steps for one seed: the primary tie plus irregular auxiliary ties.
pub fn plant_events(t: &Trajectory, steps: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let mut events = vec![t.tie_step];
    let margin = (2.0 * t.tie_sharpness).ceil() as usize;
    let lo = margin;
    let hi = steps.saturating_sub(t.mismatch_lag + margin + 1);
    let mut attempts = 0;
    while events.len() < 1 + t.aux_ties && attempts < 10_000 && hi > lo {
        attempts += 1;
        let e = rng.random_range(lo..=hi);
        if events.iter().all(|&o| o.abs_diff(e) >= t.min_separation) {
            events.push(e);
        }
    }
    events.sort_unstable();
    events
}

/// Rank-1 weight edits that plant score ties and a delayed
/// value-conditioning degradation in one head.
pub struct TiePlant {
    traj: Trajectory,
    events: Vec<usize>,
    row: usize,
    keys: (usize, usize),
    z: Matrix,
    dual: DMatrix<f64>,
}

impl TiePlant {
    /// `x0` is the fixed input; ties are planted for the first-LN output of
    /// the chosen layer, which must be fixed across steps (layer 0).
    pub fn new(params: &Params, x0: &Matrix, traj: &Trajectory, events: Vec<usize>) -> Result<Self, DriverError> {
        let mc = &params.config;
        if traj.layer != 0 {
            return Err(DriverError::Scenario("ties can only be planted in layer 0".into()));
        }
        let n = mc.seq_len;
        let z = ln_rows(x0, &params.layers[0].ln1, &PrecisionSpec::reference());
        let dual = z.to_nalgebra().pseudo_inverse(1e-12).map_err(|e| DriverError::Scenario(e.to_string()))?;
        let row = n / 2;
        let keys = ((row + 1) % n, (row + 2) % n);
        Ok(Self { traj: traj.clone(), events, row, keys, z, dual })
    }

    pub fn events(&self) -> &[usize] {
        &self.events
    }

    /// Gap between the two planted logits at step `t`.
    pub fn gap(&self, t: f64) -> f64 {
        let w = self.traj.tie_sharpness;
        let closest = self.events.iter().map(|&e| (-((t - e as f64) / w).powi(2)).exp()).fold(0.0, f64::max);
        self.traj.gap_max * (1.0 - closest)
    }

    /// `4p(1−p)` of the planted pair, one at a tie.
    pub fn tie_profile(&self, t: f64) -> f64 {
        let c = (self.gap(t) / 2.0).cosh();
        1.0 / (c * c)
    }

    /// Injected amplification `1 + g·profile(t − lag)`.
    pub fn amplification(&self, t: f64) -> f64 {
        1.0 + self.traj.mismatch_gain * self.tie_profile(t - self.traj.mismatch_lag as f64)
    }

    /// Adds `col(E, j) ⊗ delta` to the head's column block of `w`, which
    /// shifts only row `j` of `Z·w` by `delta`.
    fn shift_row(&self, w: &mut Matrix, col0: usize, j: usize, delta: &[f64]) {
        for a in 0..w.rows() {
            let e = self.dual[(a, j)];
            for (b, &d) in delta.iter().enumerate() {
                w[(a, col0 + b)] += e * d;
            }
        }
    }

    pub fn apply(&self, params: &mut Params, t: usize) {
        let dh = params.config.d_head();
        let h = self.traj.head;
        let col0 = h * dh;
        let layer = &mut params.layers[0];
        let q = self.z.matmul(&layer.head_q(h, dh));
        let k = self.z.matmul(&layer.head_k(h, dh));
        let qi = q.row(self.row).to_vec();
        let qn2: f64 = qi.iter().map(|v| v * v).sum();
        let sqrt_d = (dh as f64).sqrt();
        let score = |j: usize| qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / sqrt_d;
        let (j1, j2) = self.keys;
        let top = (0..q.rows()).filter(|&j| j != j1 && j != j2).map(score).fold(f64::NEG_INFINITY, f64::max);
        let m = top + self.traj.margin;
        let gap = self.gap(t as f64);
        for (j, target) in [(j1, m), (j2, m - gap)] {
            let coef = (target - score(j)) * sqrt_d / qn2;
            let delta: Vec<f64> = qi.iter().map(|v| coef * v).collect();
            self.shift_row(&mut layer.w_k, col0, j, &delta);
        }
        self.inject(params, t);
    }

    /// Function-preserving rescaling of the head's weakest value direction:
    /// `W_V ← W_V(I − (1−c)uuᵀ)`, `W_O ← (I + (1/c − 1)uuᵀ)W_O`.
    fn inject(&self, params: &mut Params, t: usize) {
        let amp = self.amplification(t as f64);
        if amp == 1.0 {
            return;
        }
        let dh = params.config.d_head();
        let h = self.traj.head;
        let layer = &mut params.layers[self.traj.layer];
        let wv = layer.head_v(h, dh);
        let svd = wv.to_nalgebra().svd(false, true);
        let vt = svd.v_t.expect("requested right vectors");
        let imin = svd.singular_values.imin();
        let u: Vec<f64> = vt.row(imin).iter().copied().collect();
        let c = 1.0 / amp;
        let col0 = h * dh;
        for a in 0..wv.rows() {
            let wu: f64 = (0..dh).map(|b| wv[(a, b)] * u[b]).sum();
            for b in 0..dh {
                layer.w_v[(a, col0 + b)] -= (1.0 - c) * wu * u[b];
            }
        }
        let d = layer.w_o.cols();
        for col in 0..d {
            let uo: f64 = (0..dh).map(|b| u[b] * layer.w_o[(col0 + b, col)]).sum();
            for b in 0..dh {
                layer.w_o[(col0 + b, col)] += (amp - 1.0) * u[b] * uo;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2SeriesRow {
    pub seed: u64,
    pub step: usize,
    pub kappa_softmax: f64,
    pub fwd_error: f64,
    pub loss_proxy: f64,
}

/// Logged series of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub records: Vec<DiagnosticsRecord>,
    pub kappa_softmax: Vec<f64>,
    pub r_block: Vec<f64>,
    pub ln_mismatch: Vec<f64>,
    pub loss_proxy: Vec<f64>,
    pub events: Vec<EpsBumpEvent>,
}

impl RunLog {
    fn new() -> Self {
        Self {
            records: Vec::new(),
            kappa_softmax: Vec::new(),
            r_block: Vec::new(),
            ln_mismatch: Vec::new(),
            loss_proxy: Vec::new(),
            events: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exp2Run {
    pub seed: u64,
    pub planted: Vec<usize>,
    pub log: RunLog,
    pub fwd_error: LeadLagReport,
    pub loss_proxy: LeadLagReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exp2Output {
    pub runs: Vec<Exp2Run>,
}

impl Exp2Output {
    pub fn fwd_reports(&self) -> Vec<LeadLagReport> {
        self.runs.iter().map(|r| r.fwd_error.clone()).collect()
    }

    pub fn loss_reports(&self) -> Vec<LeadLagReport> {
        self.runs.iter().map(|r| r.loss_proxy.clone()).collect()
    }

    pub fn series_rows(&self) -> Vec<Exp2SeriesRow> {
        self.runs
            .iter()
            .flat_map(|r| {
                (0..r.log.r_block.len()).map(move |t| Exp2SeriesRow {
                    seed: r.seed,
                    step: t,
                    kappa_softmax: r.log.kappa_softmax[t],
                    fwd_error: r.log.r_block[t],
                    loss_proxy: r.log.loss_proxy[t],
                })
            })
            .collect()
    }
}

/// One Exp-2 trajectory: evolves the weights, logs max-row `κ_softmax`,
/// block mismatch and loss proxy at every step.
pub fn exp2_trajectory(cfg: &RunConfig, seed: u64) -> Result<(Vec<usize>, RunLog), DriverError> {
    let e2 = &cfg.exp2;
    let root = cfg.root_seed;
    let mc = ModelConfig { seed: derive_seed(root, &[STREAM_MODEL, seed]), ..cfg.model.clone() };
    let mut base = init_params(&mc)?;
    let x0 = random_input(mc.seq_len, mc.d_model, derive_seed(root, &[STREAM_INPUT, seed]));
    let target = random_input(mc.seq_len, mc.d_model, derive_seed(root, &[STREAM_TARGET, seed]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root, &[STREAM_DRIFT, seed]));
    let plant = match e2.trajectory.mode {
        TrajectoryMode::Drift => None,
        TrajectoryMode::ScriptedTie => {
            let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(root, &[STREAM_EVENTS, seed]));
            let events = plant_events(&e2.trajectory, e2.steps, &mut erng);
            Some(TiePlant::new(&base, &x0, &e2.trajectory, events)?)
        }
    };
    let mut log = RunLog::new();
    for step in 0..e2.steps {
        let mut params = base.clone();
        if let Some(p) = &plant {
            p.apply(&mut params, step);
        }
        let trace = forward_dual(&params, &x0, &e2.precision)?;
        let diag = diagnose(&params, &trace, &cfg.diagnostics, false)?;
        log.kappa_softmax.push(diag.max_kappa_softmax());
        log.r_block.push(trace.final_r_block());
        log.ln_mismatch.push(trace.ln_mismatch());
        log.loss_proxy.push(loss_proxy(&trace, &target));
        log.records.extend(records(step, &diag, &trace));
        drift_params(&mut base, e2.trajectory.drift_scale, &mut rng);
    }
    let planted = plant.map(|p| p.events().to_vec()).unwrap_or_default();
    Ok((planted, log))
}

/// Exp-2: lead-lag, permutation p-value and Precision@K of `κ_softmax`
/// against the forward error and the loss proxy.
pub fn run_exp2(cfg: &RunConfig, jobs: usize) -> Result<Exp2Output, DriverError> {
    let results = par_map(&cfg.exp2.seeds, jobs, |&seed| -> Result<Exp2Run, DriverError> {
        let (planted, log) = exp2_trajectory(cfg, seed)?;
        let pred = TimeSeries::new("kappa_softmax", log.kappa_softmax.clone());
        let fwd = TimeSeries::new("fwd_error", log.r_block.clone());
        let loss = TimeSeries::new("loss_proxy", log.loss_proxy.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.root_seed, &[STREAM_PERM, seed, 0]));
        let fwd_error = analyze(seed, &pred, &fwd, &cfg.earlywarning, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.root_seed, &[STREAM_PERM, seed, 1]));
        let loss_proxy = analyze(seed, &pred, &loss, &cfg.earlywarning, &mut rng)?;
        Ok(Exp2Run { seed, planted, log, fwd_error, loss_proxy })
    });
    Ok(Exp2Output { runs: results.into_iter().collect::<Result<_, _>>()? })
}

// ---------------------------------------------------------------- exp3

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Control,
    Intervention,
}

/// Tail means of one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmTails {
    pub loss: f64,
    pub r_block: f64,
    pub ln_mismatch: f64,
}

/// One matched run: an arm with or without the ε policy. Both arms of a
/// seed consume the same input and drift streams.
pub fn exp3_arm(
    cfg: &RunConfig,
    seed: u64,
    policy: Option<&EpsBumpConfig>,
) -> Result<(RunLog, ArmTails, Params), DriverError> {
    let e3 = &cfg.exp3;
    let root = cfg.root_seed;
    let mc = ModelConfig {
        seed: derive_seed(root, &[STREAM_MODEL, seed]),
        ln_eps: e3.ln_eps.unwrap_or(cfg.model.ln_eps),
        branch_gain: e3.branch_gain.unwrap_or(cfg.model.branch_gain),
        ..cfg.model.clone()
    };
    let mut params = init_params(&mc)?;
    let mut data = ChaCha8Rng::seed_from_u64(derive_seed(root, &[STREAM_INPUT, seed]));
    let mut drift = ChaCha8Rng::seed_from_u64(derive_seed(root, &[STREAM_DRIFT, seed]));
    let target = random_input(mc.seq_len, mc.d_model, derive_seed(root, &[STREAM_TARGET, seed])).scale(e3.input_scale);
    let eps_mach = e3.precision.effective_eps(Context::LayerNorm);
    let mut log = RunLog::new();
    for step in 0..e3.steps {
        let x = Matrix::from_fn(mc.seq_len, mc.d_model, |_, _| {
            let z: f64 = StandardNormal.sample(&mut data);
            z * e3.input_scale
        });
        let trace = forward_dual(&params, &x, &e3.precision)?;
        log.r_block.push(trace.final_r_block());
        log.ln_mismatch.push(trace.ln_mismatch());
        log.loss_proxy.push(loss_proxy(&trace, &target));
        if let Some(pc) = policy {
            log.events.extend(maybe_bump(&mut params, step, &trace.low, eps_mach, pc));
        }
        drift_params(&mut params, e3.drift_scale, &mut drift);
    }
    if policy.is_some_and(|p| p.restore_at_end) {
        restore(&mut params, &log.events);
    }
    let from = e3.steps - e3.tail_steps;
    let tails = ArmTails {
        loss: mean(&log.loss_proxy[from..]),
        r_block: mean(&log.r_block[from..]),
        ln_mismatch: mean(&log.ln_mismatch[from..]),
    };
    Ok((log, tails, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3SeedRow {
    pub seed: u64,
    pub rho_star: f64,
    pub eps_max: f64,
    pub control_loss: f64,
    pub intervention_loss: f64,
    pub control_r_block: f64,
    pub intervention_r_block: f64,
    pub control_ln: f64,
    pub intervention_ln: f64,
    pub delta_loss: f64,
    pub delta_r_block: f64,
    pub delta_ln: f64,
    pub n_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3SummaryRow {
    pub rho_star: f64,
    pub eps_max: f64,
    pub n_seeds: usize,
    pub delta_loss_mean: f64,
    pub delta_loss_std: f64,
    pub delta_r_block_mean: f64,
    pub delta_r_block_std: f64,
    pub delta_ln_mean: f64,
    pub delta_ln_std: f64,
    /// Fraction of seeds with `delta_ln > 0`.
    pub ln_improved_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3EventRow {
    pub seed: u64,
    pub rho_star: f64,
    pub eps_max: f64,
    #[serde(flatten)]
    pub event: EpsBumpEvent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exp3Output {
    pub seeds: Vec<Exp3SeedRow>,
    pub summary: Vec<Exp3SummaryRow>,
    pub events: Vec<Exp3EventRow>,
    /// Whether every intervention run restored its initial ε values.
    pub restored: bool,
}

/// Exp-3: matched control and intervention runs over the
/// `{ρ*} × {ε_max}` grid; Δ = control − intervention.
pub fn run_exp3(cfg: &RunConfig, jobs: usize) -> Result<Exp3Output, DriverError> {
    let e3 = &cfg.exp3;
    let controls = par_map(&e3.seeds, jobs, |&seed| exp3_arm(cfg, seed, None));
    let controls: Vec<ArmTails> = controls.into_iter().map(|r| r.map(|(_, t, _)| t)).collect::<Result<_, _>>()?;
    let cells: Vec<(f64, f64, usize)> = e3
        .rho_star
        .iter()
        .flat_map(|&r| e3.eps_max.iter().map(move |&c| (r, c)))
        .flat_map(|(r, c)| (0..e3.seeds.len()).map(move |i| (r, c, i)))
        .collect();
    let runs = par_map(&cells, jobs, |&(rho_star, eps_max, i)| {
        let pc = EpsBumpConfig { rho_star, eps_max, ..cfg.mitigation.clone() };
        let seed = e3.seeds[i];
        let policy = if e3.disable_policy { None } else { Some(&pc) };
        let initial_eps = init_params(&ModelConfig {
            seed: derive_seed(cfg.root_seed, &[STREAM_MODEL, seed]),
            ln_eps: e3.ln_eps.unwrap_or(cfg.model.ln_eps),
            branch_gain: e3.branch_gain.unwrap_or(cfg.model.branch_gain),
            ..cfg.model.clone()
        })
        .map(|p| p.ln_eps());
        exp3_arm(cfg, seed, policy).and_then(|(log, tails, params)| {
            let restored = !pc.restore_at_end || e3.disable_policy || params.ln_eps() == initial_eps?;
            Ok((log, tails, restored))
        })
    });
    let mut out = Exp3Output { seeds: Vec::new(), summary: Vec::new(), events: Vec::new(), restored: true };
    for (&(rho_star, eps_max, i), r) in cells.iter().zip(runs) {
        let (log, tails, restored) = r?;
        let c = controls[i];
        let seed = e3.seeds[i];
        out.restored &= restored;
        out.seeds.push(Exp3SeedRow {
            seed,
            rho_star,
            eps_max,
            control_loss: c.loss,
            intervention_loss: tails.loss,
            control_r_block: c.r_block,
            intervention_r_block: tails.r_block,
            control_ln: c.ln_mismatch,
            intervention_ln: tails.ln_mismatch,
            delta_loss: c.loss - tails.loss,
            delta_r_block: c.r_block - tails.r_block,
            delta_ln: c.ln_mismatch - tails.ln_mismatch,
            n_events: log.events.len(),
        });
        out.events.extend(log.events.into_iter().map(|event| Exp3EventRow { seed, rho_star, eps_max, event }));
    }
    for &rho_star in &e3.rho_star {
        for &eps_max in &e3.eps_max {
            let rows: Vec<&Exp3SeedRow> = out.seeds.iter().filter(|r| r.rho_star == rho_star && r.eps_max == eps_max).collect();
            let col = |f: fn(&Exp3SeedRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (dl, dr, dn) = (col(|r| r.delta_loss), col(|r| r.delta_r_block), col(|r| r.delta_ln));
            out.summary.push(Exp3SummaryRow {
                rho_star,
                eps_max,
                n_seeds: rows.len(),
                delta_loss_mean: mean(&dl),
                delta_loss_std: std_dev(&dl),
                delta_r_block_mean: mean(&dr),
                delta_r_block_std: std_dev(&dr),
                delta_ln_mean: mean(&dn),
                delta_ln_std: std_dev(&dn),
                ln_improved_fraction: dn.iter().filter(|&&d| d > 0.0).count() as f64 / dn.len() as f64,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- diag

/// One-shot diagnostics of a fresh random model under the first sweep
/// precision, including residual gains and the unified bound.
pub fn run_diag(cfg: &RunConfig) -> Result<Vec<DiagnosticsRecord>, DriverError> {
    let mc = ModelConfig { seed: derive_seed(cfg.root_seed, &[STREAM_MODEL]), ..cfg.model.clone() };
    diagnose_state(cfg, &init_params(&mc)?)
}

/// One-shot diagnostics of a saved model state.
pub fn diagnose_state(cfg: &RunConfig, params: &Params) -> Result<Vec<DiagnosticsRecord>, DriverError> {
    let mc = &params.config;
    mc.validate()?;
    if params.layers.len() != mc.depth {
        return Err(DriverError::Scenario(format!("state has {} layers but depth {}", params.layers.len(), mc.depth)));
    }
    let x0 = random_input(mc.seq_len, mc.d_model, derive_seed(cfg.root_seed, &[STREAM_INPUT]));
    let spec = cfg.sweep.precisions.first().copied().unwrap_or(PrecisionSpec::native(FpFormat::Fp16));
    let trace = forward_dual(params, &x0, &spec)?;
    let diag = diagnose(params, &trace, &cfg.diagnostics, true)?;
    Ok(records(0, &diag, &trace))
}

// ---------------------------------------------------------------- output

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub toolkit_version: String,
    pub experiment: Experiment,
    pub root_seed: u64,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { toolkit_version: TOOLKIT_VERSION.to_string(), experiment: cfg.experiment, root_seed: cfg.root_seed, config: cfg.clone() }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_manifest(dir: &Path, cfg: &RunConfig) -> Result<PathBuf, DriverError> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&Manifest::new(cfg))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DriverError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DriverError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads any CSV written by this module.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DriverError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::Reader::from_reader(file).deserialize().collect::<Result<_, _>>()?)
}

/// Result of any experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentOutput {
    Exp1(Exp1Output),
    Exp2(Exp2Output),
    Exp3(Exp3Output),
    Diag(Vec<DiagnosticsRecord>),
}

pub fn run_experiment(cfg: &RunConfig, jobs: usize) -> Result<ExperimentOutput, DriverError> {
    cfg.validate()?;
    Ok(match cfg.experiment {
        Experiment::Exp1 => ExperimentOutput::Exp1(run_exp1(cfg, jobs)?),
        Experiment::Exp2 => ExperimentOutput::Exp2(run_exp2(cfg, jobs)?),
        Experiment::Exp3 => ExperimentOutput::Exp3(run_exp3(cfg, jobs)?),
        Experiment::Diag => ExperimentOutput::Diag(run_diag(cfg)?),
    })
}

/// Writes the manifest and every CSV of `out` into `dir`; returns the
/// written paths.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &ExperimentOutput) -> Result<Vec<PathBuf>, DriverError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut paths = vec![write_manifest(dir, cfg)?];
    let mut put = |name: &str, f: &dyn Fn(&Path) -> Result<(), DriverError>| -> Result<(), DriverError> {
        let p = dir.join(name);
        f(&p)?;
        paths.push(p);
        Ok(())
    };
    match out {
        ExperimentOutput::Exp1(o) => {
            put("exp1_steps.csv", &|p| write_csv(p, &o.steps))?;
            put("exp1_configs.csv", &|p| write_csv(p, &o.configs))?;
            put("exp1_summary.csv", &|p| write_csv(p, &o.summaries))?;
            put("diagnostics.csv", &|p| write_csv(p, &o.records))?;
        }
        ExperimentOutput::Exp2(o) => {
            put("leadlag.csv", &|p| write_csv(p, &o.fwd_reports()))?;
            put("leadlag_loss_proxy.csv", &|p| write_csv(p, &o.loss_reports()))?;
            put("series.csv", &|p| write_csv(p, &o.series_rows()))?;
            let recs: Vec<&DiagnosticsRecord> = o.runs.iter().flat_map(|r| &r.log.records).collect();
            put("diagnostics.csv", &|p| write_csv(p, &recs))?;
            let planted: Vec<(u64, usize)> = o.runs.iter().flat_map(|r| r.planted.iter().map(move |&e| (r.seed, e))).collect();
            put("planted.csv", &|p| {
                let file = fs::File::create(p).map_err(io_err(p))?;
                let mut w = csv::Writer::from_writer(file);
                w.write_record(["seed", "tie_step"])?;
                for (s, e) in &planted {
                    w.serialize((s, e))?;
                }
                w.flush().map_err(io_err(p))?;
                Ok(())
            })?;
        }
        ExperimentOutput::Exp3(o) => {
            put("exp3_summary.csv", &|p| write_csv(p, &o.summary))?;
            put("exp3_seeds.csv", &|p| write_csv(p, &o.seeds))?;
            put("events.csv", &|p| {
                let file = fs::File::create(p).map_err(io_err(p))?;
                let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
                w.write_record(["seed", "rho_star", "eps_max", "step", "layer", "ln", "sigma2_median", "rho_before", "eps_before", "eps_after"])?;
                for e in &o.events {
                    let ev = &e.event;
                    w.serialize((e.seed, e.rho_star, e.eps_max, ev.step, ev.layer, ev.ln, ev.sigma2_median, ev.rho_before, ev.eps_before, ev.eps_after))?;
                }
                w.flush().map_err(io_err(p))?;
                Ok(())
            })?;
        }
        ExperimentOutput::Diag(rows) => {
            put("diagnostics.csv", &|p| write_csv(p, rows))?;
        }
    }
    Ok(paths)
}

/// Re-runs the experiment recorded in a manifest.
pub fn rerun_from_manifest(path: &Path, jobs: usize) -> Result<(RunConfig, ExperimentOutput), DriverError> {
    let m = read_manifest(path)?;
    let out = run_experiment(&m.config, jobs)?;
    Ok((m.config, out))
}
