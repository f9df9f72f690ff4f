//! Correlation and log-log regression used to score predictors.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("value {value} at index {index} is not positive")]
    NonPositiveValue { index: usize, value: f64 },
    #[error("sample too small: {0} points, need at least 3")]
    SampleTooSmall(usize),
    #[error("x and y lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub const MIN_SAMPLE: usize = 3;

/// Predictor values paired with observed mismatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub labels: Vec<String>,
}

impl PairedSample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, StatsError> {
        let labels = (0..x.len()).map(|i| i.to_string()).collect();
        Self::labeled(x, y, labels)
    }

    pub fn labeled(x: Vec<f64>, y: Vec<f64>, labels: Vec<String>) -> Result<Self, StatsError> {
        if x.len() != y.len() || labels.len() != x.len() {
            return Err(StatsError::LengthMismatch(x.len(), y.len()));
        }
        if x.len() < MIN_SAMPLE {
            return Err(StatsError::SampleTooSmall(x.len()));
        }
        Ok(Self { x, y, labels })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Drops pairs with a non-positive entry; returns the kept sample and
    /// the number of dropped pairs.
    pub fn positive_only(&self) -> (Vec<f64>, Vec<f64>, usize) {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (&a, &b) in self.x.iter().zip(&self.y) {
            if a > 0.0 && b > 0.0 {
                x.push(a);
                y.push(b);
            }
        }
        let dropped = self.len() - x.len();
        (x, y, dropped)
    }
}

fn logs(v: &[f64]) -> Result<Vec<f64>, StatsError> {
    v.iter()
        .enumerate()
        .map(|(index, &value)| {
            if value > 0.0 {
                Ok(value.ln())
            } else {
                Err(StatsError::NonPositiveValue { index, value })
            }
        })
        .collect()
}

/// Pearson correlation of two equal-length series.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation of `(ln x, ln y)`.
pub fn pearson_log(sample: &PairedSample) -> Result<f64, StatsError> {
    Ok(pearson(&logs(&sample.x)?, &logs(&sample.y)?))
}

/// Average ranks (1-based); tied values share the mean of their ranks.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(sample: &PairedSample) -> f64 {
    pearson(&ranks(&sample.x), &ranks(&sample.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Fit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Fit { slope, intercept, r2 }
}

/// Least-squares fit of `ln y` on `ln x`.
pub fn ols_loglog(sample: &PairedSample) -> Result<Fit, StatsError> {
    Ok(ols(&logs(&sample.x)?, &logs(&sample.y)?))
}

/// One regression-summary CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub proxy_name: String,
    pub pearson_log: f64,
    pub spearman: f64,
    pub r2: f64,
    pub slope: f64,
    pub r2_raw: f64,
    pub slope_raw: f64,
    pub n: usize,
    pub dropped: usize,
}

/// Log-space statistics (primary) plus the raw-space fit, after dropping
/// pairs with non-positive entries.
pub fn summarize(name: &str, sample: &PairedSample) -> Result<RegressionSummary, StatsError> {
    let (x, y, dropped) = sample.positive_only();
    if dropped > 0 {
        log::info!("{name}: excluded {dropped} non-positive pairs from log-space fit");
    }
    let kept = PairedSample::new(x, y)?;
    let fit = ols_loglog(&kept)?;
    let raw = ols(&kept.x, &kept.y);
    Ok(RegressionSummary {
        proxy_name: name.to_string(),
        pearson_log: pearson_log(&kept)?,
        spearman: spearman(&kept),
        r2: fit.r2,
        slope: fit.slope,
        r2_raw: raw.r2,
        slope_raw: raw.slope,
        n: kept.len(),
        dropped,
    })
}

pub fn write_summaries<W: io::Write>(writer: W, rows: &[RegressionSummary]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries<R: io::Read>(reader: R) -> csv::Result<Vec<RegressionSummary>> {
    csv::Reader::from_reader(reader).deserialize().collect()
}
