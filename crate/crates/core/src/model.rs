//! Toy pre-LN Transformer encoder with a paired reference / low-precision
//! forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{fro_norm, gemm_with, softmax_rows_with, Matrix};
use crate::precision::{Context, Kernel, PrecisionSpec};

/// Largest input dimension for dense finite-difference Jacobians.
pub const DENSE_JACOBIAN_LIMIT: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("dimension {dim} exceeds dense Jacobian limit {limit}")]
    DimensionTooLarge { dim: usize, limit: usize },
    #[error("input shape {got:?} does not match expected {expected:?}")]
    Shape { got: (usize, usize), expected: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    /// Initial ε for every LayerNorm instance.
    pub ln_eps: f64,
    pub seed: u64,
    /// Multiplier on the initial scale of `W_O` and `W₂`; small values make
    /// the residual branches contractive.
    pub branch_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            seq_len: 16,
            d_model: 32,
            n_heads: 4,
            ffn_hidden: 128,
            ln_eps: 1e-5,
            seed: 0,
            branch_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Every violated invariant, prefixed with its field name.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [
            ("depth", self.depth),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
        ] {
            if value == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            v.push(format!("d_model ({}) must be divisible by n_heads ({})", self.d_model, self.n_heads));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            v.push(format!("ln_eps must be positive and finite, got {}", self.ln_eps));
        }
        if !(self.branch_gain > 0.0 && self.branch_gain.is_finite()) {
            v.push(format!("branch_gain must be positive and finite, got {}", self.branch_gain));
        }
        v
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LnParams {
    pub fn identity(d: usize, eps: f64) -> Self {
        Self { gamma: vec![1.0; d], beta: vec![0.0; d], eps }
    }
}

/// One encoder block. Head `h` owns columns `h·d_head..(h+1)·d_head` of
/// `w_q`, `w_k`, `w_v` and the same rows of `w_o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub ln1: LnParams,
    pub ln2: LnParams,
}

impl LayerParams {
    pub fn head_q(&self, h: usize, d_head: usize) -> Matrix {
        self.w_q.col_block(h * d_head, d_head)
    }

    pub fn head_k(&self, h: usize, d_head: usize) -> Matrix {
        self.w_k.col_block(h * d_head, d_head)
    }

    pub fn head_v(&self, h: usize, d_head: usize) -> Matrix {
        self.w_v.col_block(h * d_head, d_head)
    }

    pub fn head_o(&self, h: usize, d_head: usize) -> Matrix {
        self.w_o.row_block(h * d_head, d_head)
    }

    pub fn ln(&self, id: usize) -> &LnParams {
        if id == 0 {
            &self.ln1
        } else {
            &self.ln2
        }
    }

    pub fn ln_mut(&mut self, id: usize) -> &mut LnParams {
        if id == 0 {
            &mut self.ln1
        } else {
            &mut self.ln2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
}

impl Params {
    /// Current ε of every LN instance, in `(layer, ln)` order.
    pub fn ln_eps(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| [l.ln1.eps, l.ln2.eps]).collect()
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Seeded i.i.d. Gaussian weights with standard deviation `1/√fan_in`.
pub fn init_params(config: &ModelConfig) -> Result<Params, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let m = config.ffn_hidden;
    let sd = 1.0 / (d as f64).sqrt();
    let sm = 1.0 / (m as f64).sqrt();
    let g = config.branch_gain;
    let layers = (0..config.depth)
        .map(|_| LayerParams {
            w_q: gaussian(d, d, sd, &mut rng),
            w_k: gaussian(d, d, sd, &mut rng),
            w_v: gaussian(d, d, sd, &mut rng),
            w_o: gaussian(d, d, sd * g, &mut rng),
            w1: gaussian(d, m, sd, &mut rng),
            w2: gaussian(m, d, sm * g, &mut rng),
            ln1: LnParams::identity(d, config.ln_eps),
            ln2: LnParams::identity(d, config.ln_eps),
        })
        .collect();
    Ok(Params { config: config.clone(), layers })
}

/// Random `n × d` input tokens with unit-variance entries.
pub fn random_input(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian(n, d, 1.0, &mut rng)
}

/// LayerNorm of one token under `spec` in the LN context.
pub fn ln_forward(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, spec: &PrecisionSpec) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    ln_token(x, gamma, beta, eps, &spec.kernel(Context::LayerNorm), &mut out);
    out
}

fn ln_token(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, k: &Kernel, out: &mut [f64]) {
    let d = x.len() as f64;
    let mut sum = 0.0;
    for &v in x {
        sum = k.acc(sum + v);
    }
    let mu = k.op(sum / d);
    let mut sq = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let c = k.op(v - mu);
        *o = c;
        sq = k.acc(sq + k.op(c * c));
    }
    let var = k.op(sq / d);
    let inv = k.op(1.0 / k.op(k.op(var + eps).sqrt()));
    for ((o, &g), &b) in out.iter_mut().zip(gamma).zip(beta) {
        *o = k.op(k.op(k.op(*o * inv) * g) + b);
    }
}

/// Row-wise LayerNorm.
pub fn ln_rows(x: &Matrix, ln: &LnParams, spec: &PrecisionSpec) -> Matrix {
    let k = spec.kernel(Context::LayerNorm);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        ln_token(x.row(i), &ln.gamma, &ln.beta, ln.eps, &k, out.row_mut(i));
    }
    out
}

/// Population variance of each row, in exact arithmetic.
pub fn row_variances(x: &Matrix) -> Vec<f64> {
    (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            let mu = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / r.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTaps {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Scaled scores `QKᵀ/√d_head`.
    pub s: Matrix,
    pub p: Matrix,
    pub a: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub heads: Vec<HeadTaps>,
    /// Concatenated head outputs, `n × d_model`.
    pub concat: Matrix,
    /// After the output projection.
    pub out: Matrix,
}

/// Multi-head self-attention on an already normalized input.
pub fn attention_forward(x: &Matrix, layer: &LayerParams, n_heads: usize, spec: &PrecisionSpec) -> AttentionOutput {
    let k = spec.kernel(Context::General);
    let d = x.cols();
    let dh = d / n_heads;
    let scale = (dh as f64).sqrt();
    let mut concat = Matrix::zeros(x.rows(), d);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = gemm_with(x, &layer.head_q(h, dh), &k).expect("shapes");
        let kk = gemm_with(x, &layer.head_k(h, dh), &k).expect("shapes");
        let v = gemm_with(x, &layer.head_v(h, dh), &k).expect("shapes");
        let s = gemm_with(&q, &kk.transpose(), &k).expect("shapes").map(|g| k.op(g / scale));
        let p = softmax_rows_with(&s, &k);
        let a = gemm_with(&p, &v, &k).expect("shapes");
        concat.set_col_block(h * dh, &a);
        heads.push(HeadTaps { q, k: kk, v, s, p, a });
    }
    let out = gemm_with(&concat, &layer.w_o, &k).expect("shapes");
    AttentionOutput { heads, concat, out }
}

/// `tanh`-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn ffn_forward(x: &Matrix, layer: &LayerParams, spec: &PrecisionSpec) -> Matrix {
    let k = spec.kernel(Context::General);
    let h = gemm_with(x, &layer.w1, &k).expect("shapes").map(|v| k.op(gelu(v)));
    gemm_with(&h, &layer.w2, &k).expect("shapes")
}

fn residual_add(x: &Matrix, y: &Matrix, k: &Kernel) -> Matrix {
    let mut out = x.add(y);
    out.as_mut_slice().iter_mut().for_each(|v| *v = k.op(*v));
    out
}

/// Activations recorded for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTaps {
    /// Block input `X_ℓ`, also the first LN's input.
    pub input: Matrix,
    pub ln1_out: Matrix,
    pub heads: Vec<HeadTaps>,
    /// Attention branch output after `W_O`.
    pub attn_branch: Matrix,
    /// `X_ℓ + MHSA(LN(X_ℓ))`, also the second LN's input.
    pub attn: Matrix,
    pub ln2_out: Matrix,
    /// FFN branch output.
    pub ffn: Matrix,
    /// Block output `X_{ℓ+1}`.
    pub block: Matrix,
}

impl LayerTaps {
    pub fn ln_input(&self, id: usize) -> &Matrix {
        if id == 0 {
            &self.input
        } else {
            &self.attn
        }
    }

    pub fn ln_output(&self, id: usize) -> &Matrix {
        if id == 0 {
            &self.ln1_out
        } else {
            &self.ln2_out
        }
    }
}

pub fn block_forward(x: &Matrix, layer: &LayerParams, n_heads: usize, spec: &PrecisionSpec) -> LayerTaps {
    let k = spec.kernel(Context::General);
    let ln1_out = ln_rows(x, &layer.ln1, spec);
    let att = attention_forward(&ln1_out, layer, n_heads, spec);
    let attn = residual_add(x, &att.out, &k);
    let ln2_out = ln_rows(&attn, &layer.ln2, spec);
    let ffn = ffn_forward(&ln2_out, layer, spec);
    let block = residual_add(&attn, &ffn, &k);
    LayerTaps { input: x.clone(), ln1_out, heads: att.heads, attn_branch: att.out, attn, ln2_out, ffn, block }
}

/// Full forward pass; the input is used as given, without rounding.
pub fn forward(params: &Params, x0: &Matrix, spec: &PrecisionSpec) -> Result<Vec<LayerTaps>, ModelError> {
    let expected = (params.config.seq_len, params.config.d_model);
    if x0.shape() != expected {
        return Err(ModelError::Shape { got: x0.shape(), expected });
    }
    let mut taps: Vec<LayerTaps> = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let x = taps.last().map_or(x0, |t| &t.block);
        let t = block_forward(x, layer, params.config.n_heads, spec);
        taps.push(t);
    }
    Ok(taps)
}

/// `‖X̃ − X‖_F / ‖X‖_F`, with `0/0 = 0`.
pub fn relative_mismatch(reference: &Matrix, low: &Matrix) -> f64 {
    let diff = fro_norm(&low.sub(reference));
    let base = fro_norm(reference);
    if diff == 0.0 {
        0.0
    } else {
        diff / base
    }
}

/// Which activation a mismatch is measured at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Attn,
    Ffn,
    #[default]
    Block,
}

impl std::str::FromStr for Tap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attn" => Ok(Tap::Attn),
            "ffn" => Ok(Tap::Ffn),
            "block" => Ok(Tap::Block),
            other => Err(format!("unknown tap '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerMismatch {
    pub attn: f64,
    pub ffn: f64,
    pub block: f64,
    pub ln1: f64,
    pub ln2: f64,
}

impl LayerMismatch {
    pub fn tap(&self, tap: Tap) -> f64 {
        match tap {
            Tap::Attn => self.attn,
            Tap::Ffn => self.ffn,
            Tap::Block => self.block,
        }
    }

    /// Mean over the two LN outputs.
    pub fn ln_mean(&self) -> f64 {
        0.5 * (self.ln1 + self.ln2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualTrace {
    pub spec: PrecisionSpec,
    pub reference: Vec<LayerTaps>,
    pub low: Vec<LayerTaps>,
    pub mismatch: Vec<LayerMismatch>,
}

impl DualTrace {
    pub fn depth(&self) -> usize {
        self.reference.len()
    }

    pub fn r_block(&self, layer: usize) -> f64 {
        self.mismatch[layer].block
    }

    pub fn final_r_block(&self) -> f64 {
        self.mismatch.last().map_or(0.0, |m| m.block)
    }

    pub fn final_mismatch(&self, tap: Tap) -> f64 {
        self.mismatch.last().map_or(0.0, |m| m.tap(tap))
    }

    /// Mean LN-output mismatch over every LN instance.
    pub fn ln_mismatch(&self) -> f64 {
        if self.mismatch.is_empty() {
            return 0.0;
        }
        self.mismatch.iter().map(LayerMismatch::ln_mean).sum::<f64>() / self.mismatch.len() as f64
    }
}

/// Reference and emulated passes over the same params and input.
pub fn forward_dual(params: &Params, x0: &Matrix, lp_spec: &PrecisionSpec) -> Result<DualTrace, ModelError> {
    let reference = forward(params, x0, &PrecisionSpec::reference())?;
    let low = forward(params, x0, lp_spec)?;
    let mismatch = reference
        .iter()
        .zip(&low)
        .map(|(r, l)| LayerMismatch {
            attn: relative_mismatch(&r.attn, &l.attn),
            ffn: relative_mismatch(&r.ffn, &l.ffn),
            block: relative_mismatch(&r.block, &l.block),
            ln1: relative_mismatch(&r.ln1_out, &l.ln1_out),
            ln2: relative_mismatch(&r.ln2_out, &l.ln2_out),
        })
        .collect();
    Ok(DualTrace { spec: *lp_spec, reference, low, mismatch })
}

/// Largest singular value of the central-difference Jacobian of `branch`
/// at `x`, with step `1e-5·max(1, ‖x‖_∞)`.
pub fn residual_jacobian_norm(branch: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Result<f64, ModelError> {
    let n = x.len();
    if n > DENSE_JACOBIAN_LIMIT {
        return Err(ModelError::DimensionTooLarge { dim: n, limit: DENSE_JACOBIAN_LIMIT });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let h = 1e-5 * x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut xp = x.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        xp[j] = x[j] + h;
        let fp = branch(&xp);
        xp[j] = x[j] - h;
        let fm = branch(&xp);
        xp[j] = x[j];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect());
    }
    let m = cols[0].len();
    let jac = nalgebra::DMatrix::from_fn(m, n, |i, j| cols[j][i]);
    Ok(jac.singular_values().max())
}

/// The attention branch `MHSA(LN₁(X))` of one block, in reference precision,
/// acting on the flattened token matrix.
pub fn attention_branch<'a>(layer: &'a LayerParams, config: &'a ModelConfig) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    move |x: &[f64]| {
        let spec = PrecisionSpec::reference();
        let xm = Matrix::from_vec(config.seq_len, config.d_model, x.to_vec()).expect("flattened input");
        let z = ln_rows(&xm, &layer.ln1, &spec);
        attention_forward(&z, layer, config.n_heads, &spec).out.into_vec()
    }
}

/// The FFN branch `FFN(LN₂(X))` of one block, in reference precision.
pub fn ffn_branch<'a>(layer: &'a LayerParams, config: &'a ModelConfig) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    move |x: &[f64]| {
        let spec = PrecisionSpec::reference();
        let xm = Matrix::from_vec(config.seq_len, config.d_model, x.to_vec()).expect("flattened input");
        ffn_forward(&ln_rows(&xm, &layer.ln2, &spec), layer, &spec).into_vec()
    }
}

/// Residual gains of one block at its recorded reference taps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualGains {
    pub attn: f64,
    pub ffn: f64,
}

impl ResidualGains {
    /// Gain of the composed block `(I + F_ffn)(I + F_attn) − I`, bounded by
    /// `(1 + ρ_attn)(1 + ρ_ffn) − 1`.
    pub fn layer(&self) -> f64 {
        (1.0 + self.attn) * (1.0 + self.ffn) - 1.0
    }

    pub fn small_gain(&self) -> bool {
        self.layer() < 1.0
    }
}

pub fn residual_gains(layer: &LayerParams, config: &ModelConfig, taps: &LayerTaps) -> Result<ResidualGains, ModelError> {
    let attn = residual_jacobian_norm(attention_branch(layer, config), taps.input.as_slice())?;
    let ffn = residual_jacobian_norm(ffn_branch(layer, config), taps.attn.as_slice())?;
    Ok(ResidualGains { attn, ffn })
}
