//! Low-precision floating-point emulation.
//!
//! Values live in `f64` and are re-rounded into the target format after every
//! emulated scalar operation. Rounding is round-to-nearest-even; overflow goes
//! to signed infinity; subnormals are kept unless flushing is requested.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrecisionError {
    #[error("value {value} overflows {format}")]
    Overflow { format: FpFormat, value: f64 },
    #[error("unknown floating-point format `{0}` (expected fp32, bf16 or fp16)")]
    UnknownFormat(String),
    #[error("unknown accumulation policy `{0}` (expected native or fp32)")]
    UnknownAccumulate(String),
}

/// A binary floating-point storage format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpFormat {
    Fp32,
    Bf16,
    Fp16,
}

impl FpFormat {
    pub const ALL: [FpFormat; 3] = [FpFormat::Fp32, FpFormat::Bf16, FpFormat::Fp16];

    /// Number of explicitly stored fraction bits.
    pub const fn mantissa_bits(self) -> u32 {
        match self {
            FpFormat::Fp32 => 23,
            FpFormat::Bf16 => 7,
            FpFormat::Fp16 => 10,
        }
    }

    /// Smallest normal exponent.
    pub const fn min_exp(self) -> i32 {
        match self {
            FpFormat::Fp32 | FpFormat::Bf16 => -126,
            FpFormat::Fp16 => -14,
        }
    }

    pub const fn max_exp(self) -> i32 {
        match self {
            FpFormat::Fp32 | FpFormat::Bf16 => 127,
            FpFormat::Fp16 => 15,
        }
    }

    /// Unit roundoff `2^-mantissa_bits`.
    pub fn eps_mach(self) -> f64 {
        pow2(-(self.mantissa_bits() as i32))
    }

    /// Largest finite value, e.g. 65504 for FP16.
    pub fn max_finite(self) -> f64 {
        (2.0 - pow2(-(self.mantissa_bits() as i32))) * pow2(self.max_exp())
    }

    pub fn min_positive_normal(self) -> f64 {
        pow2(self.min_exp())
    }

    pub fn name(self) -> &'static str {
        match self {
            FpFormat::Fp32 => "fp32",
            FpFormat::Bf16 => "bf16",
            FpFormat::Fp16 => "fp16",
        }
    }

    /// Round-to-nearest-even into this format, keeping subnormals.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        round_bits(self, x, false)
    }
}

impl fmt::Display for FpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FpFormat {
    type Err = PrecisionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(FpFormat::Fp32),
            "bf16" => Ok(FpFormat::Bf16),
            "fp16" => Ok(FpFormat::Fp16),
            _ => Err(PrecisionError::UnknownFormat(s.to_string())),
        }
    }
}

#[inline]
fn pow2(e: i32) -> f64 {
    // exact for the exponent range used here
    f64::from_bits(((e + 1023) as u64) << 52)
}

#[inline]
fn round_bits(format: FpFormat, x: f64, flush_subnormals: bool) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let p = format.mantissa_bits();
    let emin = format.min_exp();
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let exp = biased - 1023;

    let r = if exp >= emin {
        let shift = 52 - p;
        let lsb = (bits >> shift) & 1;
        let half = 1u64 << (shift - 1);
        let rounded = bits.wrapping_add(half - 1 + lsb) & !((1u64 << shift) - 1);
        f64::from_bits(rounded)
    } else {
        let quantum = pow2(emin - p as i32);
        (x / quantum).round_ties_even() * quantum
    };

    if r.abs() > format.max_finite() {
        return f64::INFINITY.copysign(x);
    }
    if flush_subnormals && r.abs() < format.min_positive_normal() {
        return 0.0f64.copysign(x);
    }
    r
}

/// Rounding options beyond the format itself.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundingOptions {
    pub flush_subnormals: bool,
}

/// `round_to` with default options (subnormals kept, non-strict).
#[inline]
pub fn round_to(format: FpFormat, x: f64) -> f64 {
    round_bits(format, x, false)
}

#[inline]
pub fn round_with(format: FpFormat, x: f64, opts: RoundingOptions) -> f64 {
    round_bits(format, x, opts.flush_subnormals)
}

/// Strict rounding: a finite input that lands on infinity is an error.
pub fn round_to_strict(format: FpFormat, x: f64, opts: RoundingOptions) -> Result<f64, PrecisionError> {
    let r = round_bits(format, x, opts.flush_subnormals);
    if x.is_finite() && !r.is_finite() {
        return Err(PrecisionError::Overflow { format, value: x });
    }
    Ok(r)
}

pub fn eps_mach(format: FpFormat) -> f64 {
    format.eps_mach()
}

/// Where the partial sums of a reduction are held.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulate {
    /// Accumulate in the compute format.
    Native,
    /// Accumulate in binary32.
    Fp32,
}

impl FromStr for Accumulate {
    type Err = PrecisionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "native" => Ok(Accumulate::Native),
            "fp32" => Ok(Accumulate::Fp32),
            _ => Err(PrecisionError::UnknownAccumulate(s.to_string())),
        }
    }
}

/// Which kernel family a unit roundoff is being selected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    General,
    LayerNorm,
}

/// Compute format plus accumulation policy.
///
/// A compute format of FP32 denotes the reference arm: kernels run in plain
/// `f64` with no re-rounding, so an FP32 "low-precision" pass reproduces the
/// reference pass bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionSpec {
    pub compute: FpFormat,
    #[serde(default = "default_accumulate")]
    pub accumulate: Accumulate,
    #[serde(default)]
    pub flush_subnormals: bool,
}

fn default_accumulate() -> Accumulate {
    Accumulate::Native
}

impl PrecisionSpec {
    pub const fn new(compute: FpFormat, accumulate: Accumulate) -> Self {
        Self { compute, accumulate, flush_subnormals: false }
    }

    pub const fn reference() -> Self {
        Self::new(FpFormat::Fp32, Accumulate::Native)
    }

    pub const fn native(compute: FpFormat) -> Self {
        Self::new(compute, Accumulate::Native)
    }

    pub fn is_reference(&self) -> bool {
        self.compute == FpFormat::Fp32
    }

    /// Unit roundoff governing first-order error in `context`.
    pub fn effective_eps(&self, context: Context) -> f64 {
        match (context, self.accumulate) {
            (Context::LayerNorm, _) => self.compute.eps_mach(),
            (Context::General, Accumulate::Fp32) => FpFormat::Fp32.eps_mach(),
            (Context::General, Accumulate::Native) => self.compute.eps_mach(),
        }
    }

    /// Short label such as `fp16-native` or `bf16-fp32acc`.
    pub fn label(&self) -> String {
        match self.accumulate {
            Accumulate::Native => format!("{}-native", self.compute),
            Accumulate::Fp32 => format!("{}-fp32acc", self.compute),
        }
    }

    pub fn kernel(&self, context: Context) -> Kernel {
        Kernel::new(self, context)
    }
}

impl fmt::Display for PrecisionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for PrecisionSpec {
    type Err = PrecisionError;

    /// Parses `fp16`, `fp16-native`, `bf16-fp32acc`, `fp16+fp32`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (fmt, acc) = match s.split_once(['-', '+']) {
            Some((f, a)) => (f, a.trim_end_matches("acc")),
            None => (s, "native"),
        };
        Ok(PrecisionSpec::new(fmt.parse()?, acc.parse()?))
    }
}

pub fn effective_eps(spec: &PrecisionSpec, context: Context) -> f64 {
    spec.effective_eps(context)
}

/// Rounding context handed to emulated kernels.
///
/// `op` rounds the result of a scalar operation into the compute format and
/// `acc` rounds a running partial sum into the accumulator format. Both are
/// the identity for the reference arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    compute: Option<FpFormat>,
    accum: Option<FpFormat>,
    flush: bool,
}

impl Kernel {
    pub fn new(spec: &PrecisionSpec, context: Context) -> Self {
        if spec.is_reference() {
            return Self::reference();
        }
        let accum = match (context, spec.accumulate) {
            (Context::LayerNorm, _) | (_, Accumulate::Native) => spec.compute,
            (Context::General, Accumulate::Fp32) => FpFormat::Fp32,
        };
        Self { compute: Some(spec.compute), accum: Some(accum), flush: spec.flush_subnormals }
    }

    pub const fn reference() -> Self {
        Self { compute: None, accum: None, flush: false }
    }

    pub fn is_exact(&self) -> bool {
        self.compute.is_none()
    }

    pub fn compute_format(&self) -> Option<FpFormat> {
        self.compute
    }

    #[inline(always)]
    pub fn op(&self, x: f64) -> f64 {
        match self.compute {
            Some(f) => round_bits(f, x, self.flush),
            None => x,
        }
    }

    #[inline(always)]
    pub fn acc(&self, x: f64) -> f64 {
        match self.accum {
            Some(f) => round_bits(f, x, self.flush),
            None => x,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_unit_roundoffs() {
        assert_eq!(eps_mach(FpFormat::Fp32), 2f64.powi(-23));
        assert_eq!(eps_mach(FpFormat::Bf16), 2f64.powi(-7));
        assert_eq!(eps_mach(FpFormat::Fp16), 2f64.powi(-10));
        assert!((eps_mach(FpFormat::Fp32) - 1.19e-7).abs() < 1e-9);
        assert!((eps_mach(FpFormat::Bf16) - 7.81e-3).abs() < 1e-5);
        assert!((eps_mach(FpFormat::Fp16) - 9.77e-4).abs() < 1e-6);
    }

    #[test]
    fn round_examples() {
        assert_eq!(round_to(FpFormat::Fp16, 1.0), 1.0);
        assert_eq!(round_to(FpFormat::Bf16, 1.0 + 2f64.powi(-9)), 1.0);
        assert_eq!(round_to(FpFormat::Fp16, 1.0e5), f64::INFINITY);
        assert_eq!(round_to(FpFormat::Fp16, -1.0e5), f64::NEG_INFINITY);
        assert_eq!(round_to(FpFormat::Fp16, 65504.0), 65504.0);
        assert_eq!(FpFormat::Fp16.max_finite(), 65504.0);
    }

    #[test]
    fn ties_go_to_even() {
        // 1 + 2^-11 sits halfway between 1 and 1 + 2^-10 in FP16
        assert_eq!(round_to(FpFormat::Fp16, 1.0 + 2f64.powi(-11)), 1.0);
        let odd = 1.0 + 2f64.powi(-10);
        assert_eq!(round_to(FpFormat::Fp16, odd + 2f64.powi(-11)), 1.0 + 2f64.powi(-9));
        // halfway above max finite rounds to infinity
        assert_eq!(round_to(FpFormat::Fp16, 65520.0), f64::INFINITY);
        assert_eq!(round_to(FpFormat::Fp16, 65519.0), 65504.0);
    }

    #[test]
    fn subnormals_kept_or_flushed() {
        let tiny = 2f64.powi(-20);
        assert_eq!(round_to(FpFormat::Fp16, tiny), tiny);
        let opts = RoundingOptions { flush_subnormals: true };
        assert_eq!(round_with(FpFormat::Fp16, tiny, opts), 0.0);
        assert_eq!(round_with(FpFormat::Fp16, -tiny, opts).to_bits(), (-0.0f64).to_bits());
        // below half the smallest subnormal
        assert_eq!(round_to(FpFormat::Fp16, 2f64.powi(-26)), 0.0);
    }

    #[test]
    fn strict_mode_reports_overflow() {
        let opts = RoundingOptions::default();
        assert!(matches!(
            round_to_strict(FpFormat::Fp16, 1.0e5, opts),
            Err(PrecisionError::Overflow { .. })
        ));
        assert_eq!(round_to_strict(FpFormat::Fp16, 3.0, opts), Ok(3.0));
        assert!(round_to_strict(FpFormat::Fp16, f64::INFINITY, opts).is_ok());
    }

    #[test]
    fn effective_eps_examples() {
        let s = PrecisionSpec::new(FpFormat::Fp16, Accumulate::Fp32);
        assert_eq!(s.effective_eps(Context::General), 2f64.powi(-23));
        assert_eq!(s.effective_eps(Context::LayerNorm), 2f64.powi(-10));
        let b = PrecisionSpec::native(FpFormat::Bf16);
        assert_eq!(b.effective_eps(Context::General), 2f64.powi(-7));
    }

    #[test]
    fn parse_labels() {
        assert_eq!("fp16".parse::<PrecisionSpec>().unwrap(), PrecisionSpec::native(FpFormat::Fp16));
        assert_eq!(
            "bf16-fp32acc".parse::<PrecisionSpec>().unwrap(),
            PrecisionSpec::new(FpFormat::Bf16, Accumulate::Fp32)
        );
        let s = PrecisionSpec::new(FpFormat::Fp16, Accumulate::Fp32);
        assert_eq!(s.label().parse::<PrecisionSpec>().unwrap(), s);
        assert!("fp8".parse::<PrecisionSpec>().is_err());
    }

    #[test]
    fn reference_kernel_is_identity() {
        let k = PrecisionSpec::reference().kernel(Context::General);
        assert!(k.is_exact());
        assert_eq!(k.op(0.1), 0.1);
        let lp = PrecisionSpec::new(FpFormat::Fp16, Accumulate::Fp32).kernel(Context::General);
        assert_eq!(lp.acc(0.1), (0.1f32) as f64);
        assert_eq!(lp.op(0.1), round_to(FpFormat::Fp16, 0.1));
        let ln = PrecisionSpec::new(FpFormat::Fp16, Accumulate::Fp32).kernel(Context::LayerNorm);
        assert_eq!(ln.acc(0.1), round_to(FpFormat::Fp16, 0.1));
    }
}
