//! Lead-lag scanning, permutation significance and Spike Precision@K.

use std::io;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EarlyWarningError {
    #[error("series is constant")]
    ConstantSeries,
    #[error("series too short: length {len}, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// A named, step-indexed scalar series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub name: String,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// How null predictors are generated for the permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationScheme {
    /// Rotate by a uniform shift of at least `window` steps.
    CircularShift,
    /// Rotate by a uniform shift, cut into contiguous blocks of `window`
    /// steps, and shuffle the block order.
    RotatedBlocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeConfig {
    pub horizon: usize,
    pub window: usize,
    pub z_threshold: f64,
    /// Number of alarms; `None` means `⌈0.1·T⌉`.
    pub k: Option<usize>,
    pub max_lag: usize,
    pub n_perm: usize,
    pub scheme: PermutationScheme,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self {
            horizon: 40,
            window: 20,
            z_threshold: 1.5,
            k: None,
            max_lag: 60,
            n_perm: 999,
            scheme: PermutationScheme::RotatedBlocks,
        }
    }
}

impl SpikeConfig {
    pub fn k_for(&self, len: usize) -> usize {
        self.k.unwrap_or_else(|| (len as f64 * 0.1).ceil() as usize).min(len)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [("horizon", self.horizon), ("window", self.window), ("max_lag", self.max_lag)] {
            if value == 0 {
                v.push(format!("earlywarning.{name} must be positive"));
            }
        }
        if !(self.z_threshold > 0.0) {
            v.push(format!("earlywarning.z_threshold must be positive, got {}", self.z_threshold));
        }
        if self.k == Some(0) {
            v.push("earlywarning.k must be positive".to_string());
        }
        v
    }
}

/// Best lag of a scan; `p_value` is filled by the permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagScanResult {
    pub best_lag: i64,
    pub best_corr: f64,
    pub p_value: f64,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardize with the population standard deviation.
pub fn zscore(series: &[f64]) -> Result<Vec<f64>, EarlyWarningError> {
    if series.is_empty() {
        return Err(EarlyWarningError::ConstantSeries);
    }
    let (mean, sd) = mean_std(series);
    if !(sd > 0.0) || sd < 1e-300 {
        return Err(EarlyWarningError::ConstantSeries);
    }
    Ok(series.iter().map(|v| (v - mean) / sd).collect())
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Correlation of `x[t]` with `y[t + lag]` on the overlap.
pub fn lagged_corr(x: &[f64], y: &[f64], lag: i64) -> f64 {
    let n = x.len();
    let l = lag.unsigned_abs() as usize;
    if lag >= 0 {
        pearson(&x[..n - l], &y[l..])
    } else {
        pearson(&x[l..], &y[..n - l])
    }
}

fn check(predictor: &[f64], target: &[f64], cfg: &SpikeConfig) -> Result<(), EarlyWarningError> {
    if predictor.len() != target.len() {
        return Err(EarlyWarningError::LengthMismatch(predictor.len(), target.len()));
    }
    let need = 2 * cfg.max_lag + 2;
    if predictor.len() < need {
        return Err(EarlyWarningError::TooShort { len: predictor.len(), need });
    }
    Ok(())
}

const TIE_TOL: f64 = 1e-12;

fn better(lag: i64, corr: f64, best_lag: i64, best_corr: f64) -> bool {
    if corr > best_corr + TIE_TOL {
        return true;
    }
    if corr < best_corr - TIE_TOL {
        return false;
    }
    (lag.abs(), std::cmp::Reverse(lag.signum())) < (best_lag.abs(), std::cmp::Reverse(best_lag.signum()))
}

fn scan_z(zp: &[f64], zt: &[f64], max_lag: usize) -> (i64, f64) {
    let m = max_lag as i64;
    let mut best = (0, f64::NEG_INFINITY);
    for lag in -m..=m {
        let c = lagged_corr(zp, zt, lag);
        if better(lag, c, best.0, best.1) {
            best = (lag, c);
        }
    }
    best
}

/// Lag in `[−max_lag, max_lag]` maximizing the correlation of the z-scored
/// `predictor[t]` with `target[t + lag]`. Ties go to the smaller `|lag|`,
/// then to the positive lag. `p_value` is left at 1.
pub fn lag_scan(predictor: &[f64], target: &[f64], cfg: &SpikeConfig) -> Result<LagScanResult, EarlyWarningError> {
    check(predictor, target, cfg)?;
    let zp = zscore(predictor)?;
    let zt = zscore(target)?;
    let (best_lag, best_corr) = scan_z(&zp, &zt, cfg.max_lag);
    Ok(LagScanResult { best_lag, best_corr, p_value: 1.0 })
}

fn null_predictor(z: &[f64], cfg: &SpikeConfig, rng: &mut impl Rng, out: &mut Vec<f64>) {
    let n = z.len();
    out.clear();
    match cfg.scheme {
        PermutationScheme::CircularShift => {
            let lo = cfg.window.min(n - 1).max(1);
            let hi = n - lo;
            let shift = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            out.extend(z[shift..].iter().chain(&z[..shift]));
        }
        PermutationScheme::RotatedBlocks => {
            let shift = rng.random_range(0..n);
            let rotated: Vec<f64> = z[shift..].iter().chain(&z[..shift]).copied().collect();
            let mut blocks: Vec<&[f64]> = rotated.chunks(cfg.window.max(1)).collect();
            blocks.shuffle(rng);
            for b in blocks {
                out.extend_from_slice(b);
            }
        }
    }
}

/// `(1 + #{null best |corr| ≥ observed best |corr|}) / (n_perm + 1)`, where
/// every null predictor is re-scanned for its own best lag.
pub fn permutation_pvalue(
    predictor: &[f64],
    target: &[f64],
    cfg: &SpikeConfig,
    rng: &mut impl Rng,
) -> Result<f64, EarlyWarningError> {
    check(predictor, target, cfg)?;
    let zp = zscore(predictor)?;
    let zt = zscore(target)?;
    if cfg.n_perm == 0 {
        return Ok(1.0);
    }
    let observed = scan_z(&zp, &zt, cfg.max_lag).1.abs();
    let mut buf = Vec::with_capacity(zp.len());
    let mut exceed = 0usize;
    for _ in 0..cfg.n_perm {
        null_predictor(&zp, cfg, rng, &mut buf);
        if scan_z(&buf, &zt, cfg.max_lag).1.abs() >= observed - TIE_TOL {
            exceed += 1;
        }
    }
    Ok((1 + exceed) as f64 / (cfg.n_perm + 1) as f64)
}

/// `lag_scan` followed by the permutation test.
pub fn lead_lag(
    predictor: &[f64],
    target: &[f64],
    cfg: &SpikeConfig,
    rng: &mut impl Rng,
) -> Result<LagScanResult, EarlyWarningError> {
    let mut r = lag_scan(predictor, target, cfg)?;
    r.p_value = permutation_pvalue(predictor, target, cfg, rng)?;
    Ok(r)
}

/// Steps whose value exceeds the trailing-window mean by more than
/// `z_threshold` trailing standard deviations.
pub fn detect_spikes(series: &[f64], cfg: &SpikeConfig) -> Vec<usize> {
    let w = cfg.window;
    if w == 0 || series.len() <= w {
        return Vec::new();
    }
    (w..series.len())
        .filter(|&t| {
            let (mean, sd) = mean_std(&series[t - w..t]);
            (series[t] - mean) / sd.max(1e-12) > cfg.z_threshold
        })
        .collect()
}

/// Steps of the `k` largest values, ties to the earlier step.
pub fn top_k(series: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..series.len()).collect();
    idx.sort_by(|&a, &b| series[b].total_cmp(&series[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of the top-K predictor alarms followed by a target spike within
/// `(t, t + horizon]`.
pub fn precision_at_k(predictor: &[f64], target: &[f64], cfg: &SpikeConfig) -> Result<f64, EarlyWarningError> {
    if predictor.len() != target.len() {
        return Err(EarlyWarningError::LengthMismatch(predictor.len(), target.len()));
    }
    let k = cfg.k_for(predictor.len());
    if k == 0 {
        return Ok(0.0);
    }
    let mut spike = vec![false; target.len()];
    for t in detect_spikes(target, cfg) {
        spike[t] = true;
    }
    let hits = top_k(predictor, k)
        .into_iter()
        .filter(|&t| (t + 1..=(t + cfg.horizon).min(target.len() - 1)).any(|s| spike[s]))
        .count();
    Ok(hits as f64 / k as f64)
}

/// One lead-lag CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadLagReport {
    pub seed: u64,
    pub target_name: String,
    pub best_lag: i64,
    pub best_corr: f64,
    pub p_value: f64,
    pub precision_at_k: f64,
}

pub fn analyze(
    seed: u64,
    predictor: &TimeSeries,
    target: &TimeSeries,
    cfg: &SpikeConfig,
    rng: &mut impl Rng,
) -> Result<LeadLagReport, EarlyWarningError> {
    let r = lead_lag(&predictor.values, &target.values, cfg, rng)?;
    Ok(LeadLagReport {
        seed,
        target_name: target.name.clone(),
        best_lag: r.best_lag,
        best_corr: r.best_corr,
        p_value: r.p_value,
        precision_at_k: precision_at_k(&predictor.values, &target.values, cfg)?,
    })
}

pub fn write_reports<W: io::Write>(writer: W, rows: &[LeadLagReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports<R: io::Read>(reader: R) -> csv::Result<Vec<LeadLagReport>> {
    csv::Reader::from_reader(reader).deserialize().collect()
}
