//! Cross-module invariants.

use fragility::diagnostics::{kappa_softmax_rows, median, rho_ln};
use fragility::earlywarning::{lag_scan, permutation_pvalue, precision_at_k, SpikeConfig};
use fragility::linalg::{softmax_rows, Matrix};
use fragility::mitigation::{propose_eps, EpsBumpConfig};
use fragility::model::{forward_dual, init_params, random_input, ModelConfig};
use fragility::precision::{FpFormat, PrecisionSpec};
use fragility::stats::{ols_loglog, pearson_log, spearman, PairedSample};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Moving-average smoothed noise, unit-ish variance.
fn smooth(n: usize, seed: u64) -> Vec<f64> {
    let z = noise(n + 4, seed);
    (0..n).map(|i| z[i..i + 5].iter().sum::<f64>() / 5f64.sqrt()).collect()
}

fn positive_sample() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..30).prop_flat_map(|n| (prop::collection::vec(1e-3f64..1e3, n), prop::collection::vec(1e-3f64..1e3, n)))
}

proptest! {
    #[test]
    fn correlations_are_bounded_and_scale_invariant((x, y) in positive_sample(), a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
        let s = PairedSample::new(x.clone(), y.clone()).unwrap();
        let scaled = PairedSample::new(x.iter().map(|v| a * v).collect(), y.iter().map(|v| b * v).collect()).unwrap();
        let (p, sp) = (pearson_log(&s).unwrap(), spearman(&s));
        prop_assume!(p.is_finite());
        prop_assert!(p.abs() <= 1.0 && sp.abs() <= 1.0);
        prop_assert!((pearson_log(&scaled).unwrap() - p).abs() <= 1e-9);
        prop_assert_eq!(spearman(&scaled), sp);
        let fit = ols_loglog(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&fit.r2));
    }

    #[test]
    fn proposals_stay_in_range_and_bump_only_upward(s2 in 1e-12f64..1.0, d in 8usize..256, rho_star in 0.05f64..0.95) {
        let cfg = EpsBumpConfig { rho_star, ..Default::default() };
        let eps_mach = FpFormat::Fp16.eps_mach();
        let e = propose_eps(s2, d, eps_mach, &cfg);
        prop_assert!(e >= cfg.eps_min && e <= cfg.eps_max);
        if e > cfg.eps_min && e < cfg.eps_max {
            prop_assert!((rho_ln(s2, e, d, eps_mach) - rho_star).abs() <= 4.0 * f64::EPSILON);
        } else if e == cfg.eps_max {
            prop_assert!(rho_ln(s2, e, d, eps_mach) >= rho_star);
        }
    }

    #[test]
    fn sampled_softmax_maximizer_matches_exhaustive(vals in prop::collection::vec(-6.0f64..6.0, 16..=64)) {
        let cols = 8;
        let rows = vals.len() / cols;
        let s = Matrix::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let p = softmax_rows(&s, &PrecisionSpec::reference());
        let all = kappa_softmax_rows(&s, &p, None);
        let top = kappa_softmax_rows(&s, &p, Some(rows));
        prop_assert_eq!(all.row, top.row);
        prop_assert_eq!(all.value, top.value);
    }

    #[test]
    fn precision_at_k_is_a_fraction(seed in 0u64..500) {
        let x = noise(195, seed);
        let y = noise(195, seed + 10_000);
        let v = precision_at_k(&x, &y, &SpikeConfig::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn median_is_order_free(mut v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let m = median(&v);
        v.reverse();
        prop_assert_eq!(median(&v), m);
    }
}

#[test]
fn planted_lags_survive_noise_at_snr_three() {
    let cfg = SpikeConfig::default();
    for (k, lag) in [-24i64, -16, 0, 16, 24].into_iter().enumerate() {
        let base = smooth(320, 40 + k as u64);
        let eta = noise(195, 90 + k as u64);
        let p: Vec<f64> = base[60..255].to_vec();
        let sd = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt();
        let t: Vec<f64> = (0..195).map(|i| base[(60 + i as i64 - lag) as usize] + sd / 3.0 * eta[i]).collect();
        let got = lag_scan(&p, &t, &cfg).unwrap().best_lag;
        assert!((got - lag).abs() <= 2, "planted {lag}, got {got}");
    }
}

#[test]
fn pvalue_is_monotone_in_planted_strength() {
    let cfg = SpikeConfig { n_perm: 299, ..Default::default() };
    for seed in 0..4 {
        let signal = smooth(260, 5 + seed);
        let eta = noise(195, 50 + seed);
        let p: Vec<f64> = signal[60..255].to_vec();
        let mut last = 1.0;
        for strength in [0.1, 0.2, 0.4, 0.8, 1.6, 3.2] {
            let t: Vec<f64> = (0..195).map(|i| strength * signal[60 + i - 16] + eta[i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let pv = permutation_pvalue(&p, &t, &cfg, &mut rng).unwrap();
            assert!(pv <= last, "seed {seed}, strength {strength}: p {pv} > {last}");
            last = pv;
        }
        assert!(last <= 0.01);
    }
}

#[test]
fn dual_pass_is_bit_deterministic_and_reference_arm_is_exact() {
    let cfg = ModelConfig { depth: 2, seq_len: 8, d_model: 16, n_heads: 2, ffn_hidden: 32, seed: 4, ..Default::default() };
    let params = init_params(&cfg).unwrap();
    let x = random_input(8, 16, 1);
    for f in [FpFormat::Bf16, FpFormat::Fp16] {
        let a = forward_dual(&params, &x, &PrecisionSpec::native(f)).unwrap();
        let b = forward_dual(&params, &x, &PrecisionSpec::native(f)).unwrap();
        assert_eq!(a.mismatch, b.mismatch);
        assert_eq!(a.low.last().unwrap().block, b.low.last().unwrap().block);
    }
    let r = forward_dual(&params, &x, &PrecisionSpec::reference()).unwrap();
    assert_eq!(r.final_r_block(), 0.0);
}
