//! Layer-wise fragility diagnostics, LayerNorm indicators, residual
//! relaxation factors and the first-order forward-error bounds.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cond_ridge, fro_norm, softmax_jac_norm_with, spectral_norm, vec_norm, Matrix, PowerIterConfig};
use crate::model::{residual_gains, DualTrace, HeadTaps, ModelError, Params, ResidualGains};
use crate::precision::Context;

/// Ridge added to `σ_min` in every condition number.
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("score matrix is zero")]
    ZeroScore,
    #[error("small-gain condition violated: rho[{index}] = {rho} >= 1")]
    SmallGainViolation { index: usize, rho: f64 },
    #[error("length mismatch: {0} brackets but {1} gains")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Spectral,
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Sum,
}

impl Aggregation {
    fn fold(self, values: impl Iterator<Item = f64>) -> f64 {
        match self {
            Aggregation::Max => values.fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Sum => values.sum(),
        }
    }
}

/// Kernel constants of the attention and unified bounds. A `None` GEMM
/// constant means "inner accumulation length of that GEMM".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConstants {
    pub c_gemm: Option<f64>,
    pub c_gemm_out: Option<f64>,
    pub c_smx: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        Self { c_gemm: None, c_gemm_out: None, c_smx: 4.0, c1: 1.0, c2: 1.0, c3: 1.0 }
    }
}

impl BoundConstants {
    pub fn resolve(&self, d_head: usize, seq_len: usize) -> AttentionConstants {
        AttentionConstants {
            c_smx: self.c_smx,
            c_gemm: self.c_gemm.unwrap_or(d_head as f64),
            c_gemm_out: self.c_gemm_out.unwrap_or(seq_len as f64),
        }
    }
}

/// Resolved constants for one attention bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConstants {
    pub c_smx: f64,
    pub c_gemm: f64,
    pub c_gemm_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Norm in `κ_score`.
    pub score_norm: NormMode,
    /// Norm used for `‖W_O‖` in the predictor.
    pub weight_norm: NormMode,
    pub aggregation: Aggregation,
    /// How per-layer predictors combine into one scalar.
    pub layer_reduce: Aggregation,
    pub ridge: f64,
    pub constants: BoundConstants,
    pub power_iter: PowerIterConfig,
    /// Evaluate `κ_softmax` only on the `M` rows with largest `‖S_i‖`.
    pub row_sample: Option<usize>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            score_norm: NormMode::Frobenius,
            weight_norm: NormMode::Spectral,
            aggregation: Aggregation::Max,
            layer_reduce: Aggregation::Sum,
            ridge: DEFAULT_RIDGE,
            constants: BoundConstants::default(),
            power_iter: PowerIterConfig::default(),
            row_sample: None,
        }
    }
}

fn norm(a: &Matrix, mode: NormMode, cfg: &PowerIterConfig) -> f64 {
    match mode {
        NormMode::Frobenius => fro_norm(a),
        NormMode::Spectral => {
            if a.is_empty() {
                0.0
            } else {
                spectral_norm(a, cfg).map_or(f64::NAN, |e| e.value)
            }
        }
    }
}

/// `‖Q‖‖K‖ / (‖S‖√d)` for scaled scores `S = QKᵀ/√d`.
pub fn kappa_score(q: &Matrix, k: &Matrix, s: &Matrix, d: usize, mode: NormMode) -> Result<f64, DiagnosticsError> {
    let cfg = PowerIterConfig::precise();
    let ns = norm(s, mode, &cfg);
    if ns == 0.0 {
        return Err(DiagnosticsError::ZeroScore);
    }
    Ok(norm(q, mode, &cfg) * norm(k, mode, &cfg) / (ns * (d as f64).sqrt()))
}

/// Row-level maximizer of `κ_softmax`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxSensitivity {
    pub value: f64,
    pub row: usize,
}

/// `max_i ‖J(P_i)‖₂ ‖S_i‖ / ‖P_i‖` over every row.
pub fn kappa_softmax(s: &Matrix, p: &Matrix) -> f64 {
    kappa_softmax_rows(s, p, None).value
}

/// `κ_softmax` over all rows, or only the `top` rows with largest `‖S_i‖`.
pub fn kappa_softmax_rows(s: &Matrix, p: &Matrix, top: Option<usize>) -> SoftmaxSensitivity {
    let mut rows: Vec<usize> = (0..s.rows()).collect();
    if let Some(m) = top {
        rows.sort_by(|&a, &b| vec_norm(s.row(b)).total_cmp(&vec_norm(s.row(a))).then(a.cmp(&b)));
        rows.truncate(m.max(1));
    }
    let cfg = PowerIterConfig::precise();
    let mut best = SoftmaxSensitivity { value: 0.0, row: rows.first().copied().unwrap_or(0) };
    for i in rows {
        let pi = p.row(i);
        let term = softmax_jac_norm_with(pi, &cfg) * vec_norm(s.row(i)) / vec_norm(pi);
        if term > best.value {
            best = SoftmaxSensitivity { value: term, row: i };
        }
    }
    best
}

/// `κ(V) = σ_max / (σ_min + λ)`.
pub fn kappa_v(v: &Matrix, lambda: f64) -> f64 {
    cond_ridge(v, lambda)
}

/// `κ(W₁) + κ(W₂) + κ(W_O)`.
pub fn kappa_eff(w1: &Matrix, w2: &Matrix, w_o: &Matrix, lambda: f64) -> f64 {
    cond_ridge(w1, lambda) + cond_ridge(w2, lambda) + cond_ridge(w_o, lambda)
}

/// `(σ²/ε)·d_model·ε_mach`; below one the LayerNorm is ε-dominated.
pub fn rho_ln(sigma2: f64, eps: f64, d_model: usize, eps_mach: f64) -> f64 {
    sigma2 / eps * d_model as f64 * eps_mach
}

/// `C₁σ/√ε + C₂σ²/ε + C₃`.
pub fn c_ln(sigma: f64, eps: f64, c1: f64, c2: f64, c3: f64) -> f64 {
    c1 * sigma / eps.sqrt() + c2 * sigma * sigma / eps + c3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadDiagnostics {
    pub kappa_score: f64,
    pub kappa_softmax: f64,
    pub kappa_v: f64,
}

/// `[c_smx + κ_softmax(1 + c_gemm κ_score) + c'_gemm]·ε·κ(V)`.
pub fn attention_bound(head: &HeadDiagnostics, eps: f64, c: &AttentionConstants) -> f64 {
    (c.c_smx + head.kappa_softmax * (1.0 + c.c_gemm * head.kappa_score) + c.c_gemm_out) * eps * head.kappa_v
}

/// Rigorous residual factor `(1+ρ)/(1−ρ)`.
pub fn relaxation_factor(rho: f64) -> Result<f64, DiagnosticsError> {
    if rho >= 1.0 || rho.is_nan() {
        return Err(DiagnosticsError::SmallGainViolation { index: 0, rho });
    }
    Ok((1.0 + rho) / (1.0 - rho))
}

/// `∏(1+ρ_ℓ)/(1−ρ_ℓ)`.
pub fn depth_relaxation(rhos: &[f64]) -> Result<f64, DiagnosticsError> {
    rhos.iter().enumerate().try_fold(1.0, |acc, (index, &rho)| {
        relaxation_factor(rho)
            .map(|f| acc * f)
            .map_err(|_| DiagnosticsError::SmallGainViolation { index, rho })
    })
}

/// Heuristic first-order factor `1+ρ`.
pub fn first_order_factor(rho: f64) -> f64 {
    1.0 + rho
}

/// Per-layer terms of the unified bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundBreakdown {
    pub eps: f64,
    pub brackets: Vec<f64>,
    pub downstream: Vec<f64>,
    pub total: f64,
    /// Set when any `ρ_k ≥ 1`.
    pub vacuous: bool,
}

/// `ε·Σ_ℓ bracket_ℓ·∏_{k>ℓ}(1+ρ_k)`.
pub fn unified_bound(brackets: &[f64], rhos: &[f64], eps: f64) -> Result<BoundBreakdown, DiagnosticsError> {
    if brackets.len() != rhos.len() {
        return Err(DiagnosticsError::LengthMismatch(brackets.len(), rhos.len()));
    }
    let l = brackets.len();
    let mut downstream = vec![1.0; l];
    for i in (0..l.saturating_sub(1)).rev() {
        downstream[i] = downstream[i + 1] * first_order_factor(rhos[i + 1]);
    }
    let total = eps * brackets.iter().zip(&downstream).map(|(b, d)| b * d).sum::<f64>();
    let vacuous = rhos.iter().any(|&r| !(r < 1.0));
    Ok(BoundBreakdown { eps, brackets: brackets.to_vec(), downstream, total, vacuous })
}

/// All diagnostics for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostics {
    pub heads: Vec<HeadDiagnostics>,
    pub aggregate: HeadDiagnostics,
    pub kappa_eff: f64,
    /// Median per-token input variance of each LN instance.
    pub sigma2: [f64; 2],
    pub rho_ln: [f64; 2],
    /// Summed over both LN instances.
    pub c_ln: f64,
    pub residual: Option<ResidualGains>,
    pub w_o_norm: f64,
    pub bracket: f64,
    pub attention_bound: f64,
}

impl LayerDiagnostics {
    /// `κ_softmax(1 + κ_score)κ(V)‖W_O‖₂ + κ_eff + C_LN`.
    pub fn predictor(&self) -> f64 {
        combined_predictor(self)
    }

    pub fn min_rho_ln(&self) -> f64 {
        self.rho_ln[0].min(self.rho_ln[1])
    }
}

pub fn combined_predictor(layer: &LayerDiagnostics) -> f64 {
    let a = &layer.aggregate;
    a.kappa_softmax * (1.0 + a.kappa_score) * a.kappa_v * layer.w_o_norm + layer.kappa_eff + layer.c_ln
}

/// `κ_eff + κ_softmax(1 + c κ_score)κ(V) + C_LN`.
pub fn bracket(aggregate: &HeadDiagnostics, kappa_eff: f64, c_ln: f64, c: f64) -> f64 {
    kappa_eff + aggregate.kappa_softmax * (1.0 + c * aggregate.kappa_score) * aggregate.kappa_v + c_ln
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn head_diagnostics(head: &HeadTaps, d_head: usize, cfg: &DiagnosticsConfig) -> HeadDiagnostics {
    HeadDiagnostics {
        kappa_score: kappa_score(&head.q, &head.k, &head.s, d_head, cfg.score_norm).unwrap_or(f64::INFINITY),
        kappa_softmax: kappa_softmax_rows(&head.s, &head.p, cfg.row_sample).value,
        kappa_v: kappa_v(&head.v, cfg.ridge),
    }
}

/// Diagnostics of every layer plus the unified bound.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDiagnostics {
    pub layers: Vec<LayerDiagnostics>,
    /// `None` when residual gains were not computed.
    pub bound: Option<BoundBreakdown>,
    /// Effective unit roundoff of the general context.
    pub eps: f64,
    pub predictor: f64,
    pub predictor_eps: f64,
}

impl TraceDiagnostics {
    /// Largest aggregate `κ_softmax` over layers.
    pub fn max_kappa_softmax(&self) -> f64 {
        self.layers.iter().map(|l| l.aggregate.kappa_softmax).fold(0.0, f64::max)
    }
}

/// Diagnoses the reference taps of `trace`. Residual gains (dense
/// finite-difference Jacobians) are only computed when `with_residual` is set.
pub fn diagnose(
    params: &Params,
    trace: &DualTrace,
    cfg: &DiagnosticsConfig,
    with_residual: bool,
) -> Result<TraceDiagnostics, DiagnosticsError> {
    let mc = &params.config;
    let d_head = mc.d_head();
    let consts = cfg.constants.resolve(d_head, mc.seq_len);
    let eps = trace.spec.effective_eps(Context::General);
    let eps_ln = trace.spec.effective_eps(Context::LayerNorm);
    let mut layers = Vec::with_capacity(trace.depth());
    for (layer, taps) in params.layers.iter().zip(&trace.reference) {
        let heads: Vec<HeadDiagnostics> = taps.heads.iter().map(|h| head_diagnostics(h, d_head, cfg)).collect();
        let aggregate = HeadDiagnostics {
            kappa_score: cfg.aggregation.fold(heads.iter().map(|h| h.kappa_score)),
            kappa_softmax: cfg.aggregation.fold(heads.iter().map(|h| h.kappa_softmax)),
            kappa_v: cfg.aggregation.fold(heads.iter().map(|h| h.kappa_v)),
        };
        let ke = kappa_eff(&layer.w1, &layer.w2, &layer.w_o, cfg.ridge);
        let mut sigma2 = [0.0; 2];
        let mut rho = [0.0; 2];
        let mut cl = 0.0;
        for id in 0..2 {
            let ln_eps = layer.ln(id).eps;
            sigma2[id] = median(&crate::model::row_variances(taps.ln_input(id)));
            rho[id] = rho_ln(sigma2[id], ln_eps, mc.d_model, eps_ln);
            let c = &cfg.constants;
            cl += c_ln(sigma2[id].sqrt(), ln_eps, c.c1, c.c2, c.c3);
        }
        let residual = if with_residual { Some(residual_gains(layer, mc, taps)?) } else { None };
        let w_o_norm = norm(&layer.w_o, cfg.weight_norm, &cfg.power_iter);
        layers.push(LayerDiagnostics {
            bracket: bracket(&aggregate, ke, cl, consts.c_gemm),
            attention_bound: attention_bound(&aggregate, eps, &consts),
            heads,
            aggregate,
            kappa_eff: ke,
            sigma2,
            rho_ln: rho,
            c_ln: cl,
            residual,
            w_o_norm,
        });
    }
    let bound = if with_residual {
        let brackets: Vec<f64> = layers.iter().map(|l| l.bracket).collect();
        let rhos: Vec<f64> = layers.iter().map(|l| l.residual.map_or(f64::NAN, |r| r.layer())).collect();
        Some(unified_bound(&brackets, &rhos, eps)?)
    } else {
        None
    };
    let predictor = cfg.layer_reduce.fold(layers.iter().map(combined_predictor));
    Ok(TraceDiagnostics { layers, bound, eps, predictor, predictor_eps: predictor * eps })
}

/// One CSV row: a head of a layer, or the head aggregate (`head = "agg"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub layer: usize,
    pub head: String,
    pub kappa_score: f64,
    pub kappa_softmax: f64,
    #[serde(rename = "kappa_V")]
    pub kappa_v: f64,
    pub kappa_eff: f64,
    #[serde(rename = "rho_LN")]
    pub rho_ln: f64,
    #[serde(rename = "C_LN")]
    pub c_ln: f64,
    pub rho_resid_attn: f64,
    pub rho_resid_ffn: f64,
    pub w_o_norm: f64,
    pub bracket: f64,
    pub bound_total: f64,
    pub r_block_attn: f64,
    pub r_block_ffn: f64,
    pub r_block_out: f64,
    pub predictor: f64,
    pub predictor_eps: f64,
}

/// Rows for every head and the aggregate of every layer. `rho_LN` is the
/// smaller of the layer's two LN indicators.
pub fn records(step: usize, diag: &TraceDiagnostics, trace: &DualTrace) -> Vec<DiagnosticsRecord> {
    let mut out = Vec::new();
    let total = diag.bound.as_ref().map_or(f64::NAN, |b| b.total);
    for (l, (ld, mm)) in diag.layers.iter().zip(&trace.mismatch).enumerate() {
        let predictor = combined_predictor(ld);
        let heads = ld.heads.iter().enumerate().map(|(h, hd)| (h.to_string(), hd));
        for (name, hd) in heads.chain(std::iter::once(("agg".to_string(), &ld.aggregate))) {
            out.push(DiagnosticsRecord {
                step,
                layer: l,
                head: name,
                kappa_score: hd.kappa_score,
                kappa_softmax: hd.kappa_softmax,
                kappa_v: hd.kappa_v,
                kappa_eff: ld.kappa_eff,
                rho_ln: ld.min_rho_ln(),
                c_ln: ld.c_ln,
                rho_resid_attn: ld.residual.map_or(f64::NAN, |r| r.attn),
                rho_resid_ffn: ld.residual.map_or(f64::NAN, |r| r.ffn),
                w_o_norm: ld.w_o_norm,
                bracket: ld.bracket,
                bound_total: total,
                r_block_attn: mm.attn,
                r_block_ffn: mm.ffn,
                r_block_out: mm.block,
                predictor,
                predictor_eps: predictor * diag.eps,
            });
        }
    }
    out
}

pub fn write_records<W: io::Write>(writer: W, rows: &[DiagnosticsRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: io::Read>(reader: R) -> csv::Result<Vec<DiagnosticsRecord>> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_dual, init_params, random_input, ModelConfig};
    use crate::precision::{FpFormat, PrecisionSpec};
    use approx::assert_relative_eq;

    #[test]
    fn kappa_score_identity_example() {
        let i2 = Matrix::identity(2);
        let s = i2.scale(1.0 / 2f64.sqrt());
        assert_relative_eq!(kappa_score(&i2, &i2, &s, 2, NormMode::Frobenius).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn kappa_score_is_scale_invariant_and_rejects_zero() {
        let q = random_input(5, 4, 1);
        let k = random_input(5, 4, 2);
        let s = q.matmul(&k.transpose()).scale(0.5);
        let a = kappa_score(&q, &k, &s, 4, NormMode::Frobenius).unwrap();
        let b = kappa_score(&q.scale(2.0), &k, &s.scale(2.0), 4, NormMode::Frobenius).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-14);
        let z = Matrix::zeros(5, 5);
        assert_eq!(kappa_score(&Matrix::zeros(5, 4), &k, &z, 4, NormMode::Frobenius), Err(DiagnosticsError::ZeroScore));
    }

    #[test]
    fn kappa_softmax_single_token_is_zero() {
        assert_eq!(kappa_softmax(&Matrix::from_rows(&[vec![3.0]]), &Matrix::from_rows(&[vec![1.0]])), 0.0);
    }

    #[test]
    fn kappa_softmax_two_way_tie_closed_form() {
        let t = 50.0;
        let s = Matrix::from_rows(&[vec![t, t, -1e4]]);
        let p = crate::linalg::softmax_rows(&s, &PrecisionSpec::reference());
        let expected = 0.5 * vec_norm(s.row(0)) / (1.0 / 2f64.sqrt());
        assert_relative_eq!(kappa_softmax(&s, &p), expected, max_relative = 1e-9);
    }

    #[test]
    fn kappa_softmax_uniform_matches_dense_eigen() {
        let n = 5;
        let s = Matrix::from_fn(3, n, |i, _| i as f64);
        let p = crate::linalg::softmax_rows(&s, &PrecisionSpec::reference());
        let u = 1.0 / n as f64;
        let j = nalgebra::DMatrix::from_fn(n, n, |a, b| if a == b { u } else { 0.0 } - u * u);
        let jn = j.symmetric_eigen().eigenvalues.max();
        let oracle = (0..3).map(|i| jn * vec_norm(s.row(i)) / vec_norm(p.row(i))).fold(0.0, f64::max);
        assert_relative_eq!(kappa_softmax(&s, &p), oracle, max_relative = 1e-9);
    }

    #[test]
    fn top_row_sampling_finds_exhaustive_maximizer_when_all_rows_kept() {
        let s = random_input(12, 12, 4).scale(3.0);
        let p = crate::linalg::softmax_rows(&s, &PrecisionSpec::reference());
        let full = kappa_softmax_rows(&s, &p, None);
        let sampled = kappa_softmax_rows(&s, &p, Some(12));
        assert_eq!(full, sampled);
    }

    #[test]
    fn kappa_v_examples() {
        assert_relative_eq!(kappa_v(&Matrix::identity(3), 0.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(kappa_v(&Matrix::diag(&[10.0, 1.0]), 0.0), 10.0, epsilon = 1e-12);
        let v = kappa_v(&Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]), 1e-6);
        assert!(v.is_finite());
        assert_relative_eq!(v, 2.0 / 1e-6, max_relative = 1e-6);
    }

    #[test]
    fn kappa_eff_examples() {
        let i = Matrix::identity(4);
        assert_relative_eq!(kappa_eff(&i, &i, &i, 0.0), 3.0, epsilon = 1e-12);
        let w1 = Matrix::diag(&[5.0, 1.0, 2.0, 3.0]);
        assert_relative_eq!(kappa_eff(&w1, &i, &i, 0.0), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn rho_ln_examples() {
        assert_eq!(rho_ln(1e-4, 1e-4, 1024, FpFormat::Fp16.eps_mach()), 1.0);
        assert_relative_eq!(rho_ln(4e-6, 1e-5, 128, FpFormat::Fp16.eps_mach()), 0.05, max_relative = 1e-12);
        assert_eq!(rho_ln(1.0, 1e-5, 128, 0.0), 0.0);
    }

    #[test]
    fn c_ln_examples() {
        assert_eq!(c_ln(0.0, 1e-3, 1.0, 1.0, 1.0), 1.0);
        assert_relative_eq!(c_ln(1e-4, 1e-4, 1.0, 1.0, 1.0), 1.0101, max_relative = 1e-12);
        let (s, e) = (0.3, 1e-2);
        assert_relative_eq!(c_ln(s, e / 2.0, 1.0, 0.0, 0.0), 2f64.sqrt() * c_ln(s, e, 1.0, 0.0, 0.0), max_relative = 1e-12);
        assert_relative_eq!(c_ln(s, e / 2.0, 0.0, 1.0, 0.0), 2.0 * c_ln(s, e, 0.0, 1.0, 0.0), max_relative = 1e-12);
    }

    #[test]
    fn attention_bound_examples() {
        let zero = HeadDiagnostics { kappa_score: 0.0, kappa_softmax: 0.0, kappa_v: 0.0 };
        let c0 = AttentionConstants { c_smx: 0.0, c_gemm: 1.0, c_gemm_out: 0.0 };
        assert_eq!(attention_bound(&zero, 1.0, &c0), 0.0);
        let h = HeadDiagnostics { kappa_score: 1.0, kappa_softmax: 1.0, kappa_v: 2.0 };
        assert_eq!(attention_bound(&h, 2f64.powi(-10), &c0), 2f64.powi(-8));
        let r = attention_bound(&h, FpFormat::Fp16.eps_mach(), &c0) / attention_bound(&h, FpFormat::Bf16.eps_mach(), &c0);
        assert_eq!(r, 2f64.powi(-3));
    }

    #[test]
    fn relaxation_examples() {
        assert_eq!(relaxation_factor(0.0).unwrap(), 1.0);
        assert_eq!(relaxation_factor(0.5).unwrap(), 3.0);
        assert_relative_eq!(depth_relaxation(&[0.1, 0.2]).unwrap(), (1.1 / 0.9) * 1.5, max_relative = 1e-15);
        assert!(matches!(depth_relaxation(&[0.1, 1.0]), Err(DiagnosticsError::SmallGainViolation { index: 1, .. })));
        assert_eq!(first_order_factor(0.25), 1.25);
    }

    #[test]
    fn unified_bound_examples() {
        let b = unified_bound(&[7.0], &[0.3], 0.5).unwrap();
        assert_eq!(b.total, 3.5);
        assert_eq!(b.downstream, vec![1.0]);
        let b = unified_bound(&[2.0, 3.0], &[0.9, 0.5], 1.0).unwrap();
        assert_eq!(b.total, 1.5 * 2.0 + 3.0);
        assert!(!b.vacuous);
        assert_eq!(unified_bound(&[0.0, 0.0], &[0.2, 2.0], 1.0).unwrap().total, 0.0);
        assert!(unified_bound(&[0.0, 0.0], &[0.2, 2.0], 1.0).unwrap().vacuous);
        assert!(unified_bound(&[1.0], &[], 1.0).is_err());
    }

    #[test]
    fn predictor_without_attention_terms() {
        let zero = HeadDiagnostics { kappa_score: 0.0, kappa_softmax: 0.0, kappa_v: 0.0 };
        let ld = LayerDiagnostics {
            heads: vec![zero],
            aggregate: zero,
            kappa_eff: 3.0,
            sigma2: [0.0; 2],
            rho_ln: [0.0; 2],
            c_ln: 1.0,
            residual: None,
            w_o_norm: 1.0,
            bracket: 0.0,
            attention_bound: 0.0,
        };
        assert_eq!(combined_predictor(&ld), 4.0);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    fn traced(spec: PrecisionSpec) -> (Params, DualTrace) {
        let cfg = ModelConfig { depth: 2, seq_len: 6, d_model: 8, n_heads: 2, ffn_hidden: 16, branch_gain: 0.1, ..Default::default() };
        let p = init_params(&cfg).unwrap();
        let t = forward_dual(&p, &random_input(6, 8, 5), &spec).unwrap();
        (p, t)
    }

    #[test]
    fn predictor_eps_scales_with_unit_roundoff() {
        let cfg = DiagnosticsConfig::default();
        let (p, t16) = traced(PrecisionSpec::native(FpFormat::Fp16));
        let (_, tb) = traced(PrecisionSpec::native(FpFormat::Bf16));
        let d16 = diagnose(&p, &t16, &cfg, false).unwrap();
        let db = diagnose(&p, &tb, &cfg, false).unwrap();
        assert_eq!(d16.predictor, db.predictor);
        assert_eq!(d16.predictor_eps / db.predictor_eps, 2f64.powi(-3));
    }

    #[test]
    fn records_recompute_predictor_from_logged_fields() {
        let (p, t) = traced(PrecisionSpec::native(FpFormat::Fp16));
        let diag = diagnose(&p, &t, &DiagnosticsConfig::default(), true).unwrap();
        let rows = records(3, &diag, &t);
        assert_eq!(rows.len(), 2 * 3);
        for r in rows.iter().filter(|r| r.head == "agg") {
            let recomputed = r.kappa_softmax * (1.0 + r.kappa_score) * r.kappa_v * r.w_o_norm + r.kappa_eff + r.c_ln;
            assert_relative_eq!(recomputed, r.predictor, max_relative = 1e-12);
            assert!(r.bound_total.is_finite());
        }
    }

    #[test]
    fn records_round_trip_through_csv() {
        let (p, t) = traced(PrecisionSpec::native(FpFormat::Bf16));
        let diag = diagnose(&p, &t, &DiagnosticsConfig::default(), false).unwrap();
        let rows = records(0, &diag, &t);
        let mut buf = Vec::new();
        write_records(&mut buf, &rows).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap().lines().next().unwrap().to_string();
        assert!(header.starts_with("step,layer,head,kappa_score,kappa_softmax,kappa_V,kappa_eff,rho_LN,C_LN"));
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back.len(), rows.len());
        assert!(back[0].rho_resid_attn.is_nan());
        assert_eq!(back[1].kappa_softmax, rows[1].kappa_softmax);
    }
}
