//! Independent numeric oracles: exhaustive chunk-probability enumeration,
//! the direct-product schedule constant, and distortion moment checks.

use vcl_core::policy::forward::chunk_log_prob;
use vcl_core::policy::{HeadKind, ModelConfig, PolicyModel};
use vcl_core::probe::{distort, distort_iterative, DiffusionSchedule};
use vcl_core::rng::stream_rng;
use vcl_core::simenv::Observation;

/// Cumulative product of (1 - beta_k) for the default schedule, pinned by
/// direct iteration before the build.
const ALPHA_BAR_999: f64 = 0.08153862964294348;

#[test]
fn schedule_alpha_bar_matches_direct_product_oracle() {
    let k = 999;
    let (b0, b1) = (1e-5, 5e-3);
    // Direct-product oracle, written independently of DiffusionSchedule.
    let mut prod = 1.0f64;
    for i in 0..k {
        let beta = b0 + (b1 - b0) * i as f64 / (k - 1) as f64;
        prod *= 1.0 - beta;
    }
    assert!((prod - ALPHA_BAR_999).abs() < 1e-15, "oracle drifted: {prod}");
    let s = DiffusionSchedule::linear(k, b0, b1).unwrap();
    assert!((s.alpha_bar_final() - prod).abs() < 1e-15);
    // Order-of-magnitude cross-check: exp(-sum beta) = exp(-2.502495).
    let approx = (-2.502495f64).exp();
    assert!((s.alpha_bar_final() - approx).abs() / approx < 0.01);
}

fn enum_model() -> (PolicyModel, Observation, Vec<u16>) {
    // M = 2 (d_action 2, horizon 1), V = 3.
    let cfg = ModelConfig {
        d_action: 2,
        horizon: 1,
        vocab: 3,
        width: 8,
        blocks: 2,
        heads: 2,
        mlp_hidden: 16,
        img_h: 8,
        img_w: 8,
        channels: 3,
        patch: 4,
        prompt_len: 4,
        prompt_vocab: 12,
        head: HeadKind::Discrete,
    };
    let model = PolicyModel::init(cfg.clone(), 1234).unwrap();
    let mut rng = stream_rng(9, "enum-obs");
    use rand::Rng;
    let obs = Observation {
        height: 8,
        width: 8,
        channels: 3,
        pixels: (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    (model, obs, vec![0, 1, 2, 3])
}

#[test]
fn exhaustive_chunk_probabilities_sum_to_one() {
    let (model, obs, instr) = enum_model();
    let mut total = 0.0f64;
    for a in 0..3u16 {
        for b in 0..3u16 {
            let lp = chunk_log_prob(&model, &obs, &instr, &[a, b]).unwrap();
            total += lp.exp();
        }
    }
    assert!((total - 1.0).abs() < 1e-9, "total probability {total}");
}

#[test]
fn distortion_moments_match_closed_form() {
    // Sample mean -> sqrt(abar) * o, sample variance -> 1 - abar, within
    // 3 standard errors at 1e4 draws per pixel.
    let schedule = DiffusionSchedule::linear(999, 1e-5, 5e-3).unwrap();
    let s = schedule.signal_coef();
    let var = 1.0 - schedule.alpha_bar_final();
    let values = [-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0];
    let obs = Observation {
        height: 2,
        width: 4,
        channels: 1,
        pixels: values.to_vec(),
    };
    let n = 10_000usize;
    let mut sums = vec![0.0f64; values.len()];
    let mut sq = vec![0.0f64; values.len()];
    for draw in 0..n {
        let out = distort(&obs, &schedule, 70_000 + draw as u64);
        for (i, &p) in out.pixels.iter().enumerate() {
            sums[i] += p;
            sq[i] += p * p;
        }
    }
    let se_mean = (var / n as f64).sqrt();
    let se_var = var * (2.0 / (n as f64 - 1.0)).sqrt();
    for (i, &v) in values.iter().enumerate() {
        let mean = sums[i] / n as f64;
        let sample_var = sq[i] / n as f64 - mean * mean;
        let z_mean = (mean - s * v).abs() / se_mean;
        let z_var = (sample_var - var).abs() / se_var;
        assert!(z_mean < 3.0, "pixel {i}: mean z = {z_mean:.2}");
        assert!(z_var < 3.0, "pixel {i}: var z = {z_var:.2}");
    }
}

#[test]
fn iterative_chain_matches_closed_form_distribution() {
    // The literal K-step chain has the same first two moments as the
    // single-shot sample.
    let schedule = DiffusionSchedule::linear(199, 1e-4, 8e-3).unwrap();
    let s = schedule.signal_coef();
    let var = 1.0 - schedule.alpha_bar_final();
    let obs = Observation {
        height: 1,
        width: 2,
        channels: 1,
        pixels: vec![0.75, -0.5],
    };
    let n = 4000usize;
    let mut sums = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    for draw in 0..n {
        let out = distort_iterative(&obs, &schedule, 50_000 + draw as u64);
        for i in 0..2 {
            sums[i] += out.pixels[i];
            sq[i] += out.pixels[i] * out.pixels[i];
        }
    }
    let se_mean = (var / n as f64).sqrt();
    let se_var = var * (2.0 / (n as f64 - 1.0)).sqrt();
    for i in 0..2 {
        let mean = sums[i] / n as f64;
        let sample_var = sq[i] / n as f64 - mean * mean;
        assert!((mean - s * obs.pixels[i]).abs() < 3.5 * se_mean);
        assert!((sample_var - var).abs() < 3.5 * se_var);
    }
}

#[test]
fn vc_profile_is_zero_on_identical_observation() {
    let (model, obs, instr) = enum_model();
    let zero_schedule = DiffusionSchedule::zero(999);
    let profile = vcl_core::probe::vc_profile(&model, &obs, &instr, &zero_schedule, 7).unwrap();
    assert_eq!(profile.kl.len(), 2);
    for &kl in &profile.kl {
        assert!(kl.abs() < 1e-9);
        assert!(kl >= 0.0);
    }
}

#[test]
fn vc_profile_positive_under_real_distortion() {
    let (model, obs, instr) = enum_model();
    let schedule = DiffusionSchedule::linear(999, 1e-5, 5e-3).unwrap();
    let profile = vcl_core::probe::vc_profile(&model, &obs, &instr, &schedule, 11).unwrap();
    assert!(profile.kl.iter().all(|&k| k.is_finite() && k >= 0.0));
    assert!(profile.kl.iter().any(|&k| k > 0.0));
}
