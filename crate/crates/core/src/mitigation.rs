//! Monotone LayerNorm ε-bump policy.

use std::io;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{median, rho_ln};
use crate::linalg::Matrix;
use crate::model::{row_variances, LayerTaps, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsBumpConfig {
    pub rho_star: f64,
    pub check_interval: usize,
    pub subsample_size: usize,
    pub eps_min: f64,
    pub eps_max: f64,
    pub restore_at_end: bool,
}

impl Default for EpsBumpConfig {
    fn default() -> Self {
        Self {
            rho_star: 0.5,
            check_interval: 5,
            subsample_size: 16,
            eps_min: 1e-6,
            eps_max: 1e-2,
            restore_at_end: true,
        }
    }
}

impl EpsBumpConfig {
    pub const RHO_STAR_GRID: [f64; 3] = [0.5, 0.6, 0.7];
    pub const EPS_MAX_GRID: [f64; 2] = [5e-3, 1e-2];

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.rho_star > 0.0 && self.rho_star < 1.0) {
            v.push(format!("mitigation.rho_star must lie in (0,1), got {}", self.rho_star));
        }
        if self.check_interval == 0 {
            v.push("mitigation.check_interval must be positive".to_string());
        }
        if self.subsample_size == 0 {
            v.push("mitigation.subsample_size must be positive".to_string());
        }
        if !(self.eps_min > 0.0) {
            v.push(format!("mitigation.eps_min must be positive, got {}", self.eps_min));
        }
        if !(self.eps_max >= self.eps_min) {
            v.push(format!("mitigation.eps_max ({}) must be at least eps_min ({})", self.eps_max, self.eps_min));
        }
        v
    }
}

/// One applied ε update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsBumpEvent {
    pub step: usize,
    pub layer: usize,
    pub ln: usize,
    pub sigma2_median: f64,
    pub rho_before: f64,
    pub eps_before: f64,
    pub eps_after: f64,
}

/// `clip(σ²_med·d_model·ε_mach/ρ*, ε_min, ε_max)`.
pub fn propose_eps(sigma2_median: f64, d_model: usize, eps_mach: f64, cfg: &EpsBumpConfig) -> f64 {
    (sigma2_median * d_model as f64 * eps_mach / cfg.rho_star).clamp(cfg.eps_min, cfg.eps_max)
}

/// Median per-token variance over the first `k` rows.
pub fn subsample_sigma2(x: &Matrix, k: usize) -> f64 {
    let rows = x.rows().min(k);
    median(&row_variances(&x.row_block(0, rows)))
}

/// Runs the policy on acting steps (`step % check_interval == 0`), using the
/// LN inputs recorded in `taps`. `eps_mach` is the compute format's.
pub fn maybe_bump(
    params: &mut Params,
    step: usize,
    taps: &[LayerTaps],
    eps_mach: f64,
    cfg: &EpsBumpConfig,
) -> Vec<EpsBumpEvent> {
    let mut events = Vec::new();
    if !step.is_multiple_of(cfg.check_interval.max(1)) {
        return events;
    }
    let d = params.config.d_model;
    for (layer, (lp, t)) in params.layers.iter_mut().zip(taps).enumerate() {
        for ln in 0..2 {
            let sigma2 = subsample_sigma2(t.ln_input(ln), cfg.subsample_size);
            let p = lp.ln_mut(ln);
            let rho = rho_ln(sigma2, p.eps, d, eps_mach);
            if !(rho < 1.0) {
                continue;
            }
            let proposal = propose_eps(sigma2, d, eps_mach, cfg);
            if proposal > p.eps {
                events.push(EpsBumpEvent {
                    step,
                    layer,
                    ln,
                    sigma2_median: sigma2,
                    rho_before: rho,
                    eps_before: p.eps,
                    eps_after: proposal,
                });
                p.eps = proposal;
            }
        }
    }
    events
}

/// Undoes `events` so every ε returns to its pre-run value.
pub fn restore(params: &mut Params, events: &[EpsBumpEvent]) {
    for e in events.iter().rev() {
        params.layers[e.layer].ln_mut(e.ln).eps = e.eps_before;
    }
}

pub fn write_events<W: io::Write>(writer: W, events: &[EpsBumpEvent]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["step", "layer", "ln", "sigma2_median", "rho_before", "eps_before", "eps_after"])?;
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events<R: io::Read>(reader: R) -> csv::Result<Vec<EpsBumpEvent>> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, random_input, ModelConfig};
    use crate::precision::{FpFormat, PrecisionSpec};
    use approx::assert_relative_eq;

    const FP16: f64 = 1.0 / 1024.0;

    #[test]
    fn proposal_examples() {
        let cfg = EpsBumpConfig::default();
        assert_eq!(propose_eps(4e-6, 128, FP16, &cfg), 1e-6);
        assert_eq!(propose_eps(0.04, 128, FP16, &cfg), 1e-2);
        assert_eq!(propose_eps(0.0, 128, FP16, &cfg), cfg.eps_min);
    }

    #[test]
    fn uncapped_proposal_hits_target_exactly() {
        let cfg = EpsBumpConfig { rho_star: 0.6, ..Default::default() };
        let s2 = 3e-5;
        let eps = propose_eps(s2, 64, FP16, &cfg);
        assert!(eps > cfg.eps_min && eps < cfg.eps_max);
        assert_relative_eq!(rho_ln(s2, eps, 64, FP16), 0.6, max_relative = 4.0 * f64::EPSILON);
    }

    #[test]
    fn config_violations() {
        let bad = EpsBumpConfig { rho_star: 1.5, eps_min: 1e-2, eps_max: 1e-3, ..Default::default() };
        let v = bad.violations();
        assert_eq!(v.len(), 2);
        assert!(v[0].contains("(0,1)"));
    }

    fn setup(scale: f64, ln_eps: f64) -> (Params, Vec<LayerTaps>) {
        let cfg = ModelConfig { depth: 2, seq_len: 16, d_model: 8, n_heads: 2, ffn_hidden: 16, ln_eps, branch_gain: 1e-4, ..Default::default() };
        let p = init_params(&cfg).unwrap();
        let x = random_input(16, 8, 1).scale(scale);
        let taps = forward(&p, &x, &PrecisionSpec::native(FpFormat::Fp16)).unwrap();
        (p, taps)
    }

    #[test]
    fn no_event_outside_eps_dominated_regime() {
        let (mut p, taps) = setup(1.0, 1e-5);
        assert!(maybe_bump(&mut p, 0, &taps, FP16, &EpsBumpConfig::default()).is_empty());
    }

    #[test]
    fn no_event_off_interval_or_when_proposal_not_larger() {
        let (mut p, taps) = setup(1e-3, 1e-5);
        assert!(maybe_bump(&mut p, 3, &taps, FP16, &EpsBumpConfig::default()).is_empty());
        let (mut p, taps) = setup(1e-3, 0.5);
        assert!(maybe_bump(&mut p, 5, &taps, FP16, &EpsBumpConfig::default()).is_empty());
    }

    #[test]
    fn capped_event_in_deep_domination() {
        let (mut p, taps) = setup(1e-3, 1e-5);
        let cfg = EpsBumpConfig { eps_min: 1e-2, eps_max: 1e-2, ..Default::default() };
        let events = maybe_bump(&mut p, 10, &taps, FP16, &cfg);
        assert!(!events.is_empty());
        for e in &events {
            assert!(e.rho_before < 1.0);
            assert_eq!(e.eps_after, 1e-2);
            assert_eq!(p.layers[e.layer].ln(e.ln).eps, 1e-2);
        }
    }

    #[test]
    fn restore_returns_full_state() {
        let (mut p, taps) = setup(1e-3, 1e-7);
        let before = p.clone();
        restore(&mut p, &[]);
        assert_eq!(p, before);
        let mut events = maybe_bump(&mut p, 0, &taps, FP16, &EpsBumpConfig::default());
        let cfg2 = EpsBumpConfig { eps_min: 1e-4, eps_max: 1e-4, ..Default::default() };
        events.extend(maybe_bump(&mut p, 5, &taps, FP16, &cfg2));
        assert!(events.len() >= 4);
        assert_ne!(p, before);
        restore(&mut p, &events);
        assert_eq!(p, before);
    }

    #[test]
    fn events_round_trip() {
        let events = vec![EpsBumpEvent { step: 5, layer: 1, ln: 0, sigma2_median: 1e-7, rho_before: 0.1, eps_before: 1e-7, eps_after: 1e-6 }];
        let mut buf = Vec::new();
        write_events(&mut buf, &events).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("step,layer,ln,sigma2_median,rho_before,eps_before,eps_after"));
        assert_eq!(read_events(buf.as_slice()).unwrap(), events);
        let mut empty = Vec::new();
        write_events(&mut empty, &[]).unwrap();
        assert!(read_events(empty.as_slice()).unwrap().is_empty());
    }
}
