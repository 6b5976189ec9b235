//! Visual-conditioning metrology.
//!
//! An observation is distorted by a forward-diffusion chain and the shift in
//! the policy's per-position action token distributions is measured as a KL
//! profile. Profiles aggregate into per-cohort summaries.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::forward::{decode_greedy, token_distributions};
use crate::policy::PolicyModel;
use crate::rng::stream_rng;
use crate::simenv::Observation;

/// Probability floor applied inside the KL log ratio.
pub const KL_PROB_FLOOR: f64 = 1e-12;

/// Linear-variance forward diffusion schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    /// Cumulative products of (1 - beta_k).
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Variance rises linearly from `beta_start` to `beta_end` over `k` steps.
    pub fn linear(k: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::config("schedule needs at least 2 steps"));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start < beta_end) {
            return Err(Error::config(
                "schedule needs 0 < beta_start < beta_end < 1",
            ));
        }
        let beta: Vec<f64> = (0..k)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64)
            .collect();
        Ok(Self::from_betas(beta))
    }

    /// Degenerate all-zero schedule: the distortion becomes the identity.
    pub fn zero(k: usize) -> Self {
        Self::from_betas(vec![0.0; k.max(1)])
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        DiffusionSchedule { beta, alpha_bar }
    }

    pub fn k(&self) -> usize {
        self.beta.len()
    }

    /// Terminal cumulative product.
    pub fn alpha_bar_final(&self) -> f64 {
        *self.alpha_bar.last().expect("non-empty schedule")
    }

    pub fn signal_coef(&self) -> f64 {
        self.alpha_bar_final().sqrt()
    }

    pub fn noise_coef(&self) -> f64 {
        (1.0 - self.alpha_bar_final()).sqrt()
    }
}

/// Single-shot sample of the K-step chain: `o' = sqrt(abar_K) o +
/// sqrt(1 - abar_K) eps`. Output is not clamped; it feeds the model.
pub fn distort(obs: &Observation, schedule: &DiffusionSchedule, seed: u64) -> Observation {
    let mut rng = stream_rng(seed, "distort");
    let s = schedule.signal_coef();
    let n = schedule.noise_coef();
    let mut out = obs.clone();
    for p in &mut out.pixels {
        let eps: f64 = rng.sample(StandardNormal);
        *p = s * *p + n * eps;
    }
    out
}

/// Literal K-step Markov chain, kept for distributional equivalence checks
/// against the single-shot form.
pub fn distort_iterative(obs: &Observation, schedule: &DiffusionSchedule, seed: u64) -> Observation {
    let mut rng = stream_rng(seed, "distort-iterative");
    let mut out = obs.clone();
    for &b in &schedule.beta {
        let keep = (1.0 - b).sqrt();
        let noise = b.sqrt();
        for p in &mut out.pixels {
            let eps: f64 = rng.sample(StandardNormal);
            *p = keep * *p + noise * eps;
        }
    }
    out
}

/// KL(p || q) in nats with the probability floor applied inside the log.
/// Zero-probability p entries contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi.max(KL_PROB_FLOOR).ln() - qi.max(KL_PROB_FLOOR).ln());
        }
    }
    kl.max(0.0)
}

/// Per-position KL profile of one (observation, instruction) pair, plus the
/// rollout context it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VcProfile {
    pub kl: Vec<f64>,
    pub rollout: u64,
    pub timestep: usize,
    pub success: Option<bool>,
}

/// Decode a greedy prefix from the clean observation, then compare clean vs
/// distorted token distributions position by position under that one prefix.
pub fn vc_profile(
    model: &PolicyModel,
    obs: &Observation,
    instruction: &[u16],
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<VcProfile> {
    let m = model.cfg.m_tokens();
    let prefix = decode_greedy(model, obs, instruction)?;
    let distorted = distort(obs, schedule, seed);
    let clean = token_distributions(model, obs, instruction, &prefix[..m - 1])?;
    let noisy = token_distributions(model, &distorted, instruction, &prefix[..m - 1])?;
    let mut kl = Vec::with_capacity(m);
    for tau in 0..m {
        let v = kl_divergence(&clean[tau].probs, &noisy[tau].probs);
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite KL at token position {tau}"
            )));
        }
        kl.push(v);
    }
    Ok(VcProfile {
        kl,
        rollout: 0,
        timestep: 0,
        success: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Success,
    Failure,
    All,
}

impl Cohort {
    pub fn label(&self) -> &'static str {
        match self {
            Cohort::Success => "success",
            Cohort::Failure => "failure",
            Cohort::All => "all",
        }
    }

    fn admits(&self, p: &VcProfile) -> bool {
        match self {
            Cohort::All => true,
            Cohort::Success => p.success == Some(true),
            Cohort::Failure => p.success == Some(false),
        }
    }
}

/// Per-position mean and population standard deviation over a cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VcSummary {
    pub cohort: Cohort,
    pub count: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl VcSummary {
    pub fn grand_mean(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len() as f64
    }

    /// Mean over the first `d` token positions.
    pub fn early_mean(&self, d: usize) -> f64 {
        let d = d.min(self.mean.len());
        self.mean[..d].iter().sum::<f64>() / d as f64
    }
}

pub fn cohort_summary(profiles: &[VcProfile], cohort: Cohort) -> Result<VcSummary> {
    let selected: Vec<&VcProfile> = profiles.iter().filter(|p| cohort.admits(p)).collect();
    if selected.is_empty() {
        return Err(Error::config(format!("cohort {} is empty", cohort.label())));
    }
    let m = selected[0].kl.len();
    let n = selected.len() as f64;
    let mut mean = vec![0.0; m];
    for p in &selected {
        for (s, &v) in mean.iter_mut().zip(&p.kl) {
            *s += v;
        }
    }
    for s in &mut mean {
        *s /= n;
    }
    let mut std = vec![0.0; m];
    for p in &selected {
        for ((s, &v), &mu) in std.iter_mut().zip(&p.kl).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
    }
    Ok(VcSummary {
        cohort,
        count: selected.len(),
        mean,
        std,
    })
}

/// One (observation, instruction) pair to probe, with its rollout context.
#[derive(Debug, Clone)]
pub struct ProbeInput {
    pub obs: Observation,
    pub instruction: Vec<u16>,
    pub rollout: u64,
    pub timestep: usize,
    pub success: Option<bool>,
}

/// Profiles for a batch of probe inputs, computed in parallel with one
/// distortion seed per input derived from `master_seed`.
pub fn batch_profiles(
    model: &PolicyModel,
    inputs: &[ProbeInput],
    schedule: &DiffusionSchedule,
    master_seed: u64,
) -> Result<Vec<VcProfile>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let seed = master_seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(i as u64);
            let mut p = vc_profile(model, &input.obs, &input.instruction, schedule, seed)?;
            p.rollout = input.rollout;
            p.timestep = input.timestep;
            p.success = input.success;
            Ok(p)
        })
        .collect()
}

/// One probe point: the plain instruction-following view and its
/// track-annotated counterpart.
#[derive(Debug, Clone)]
pub struct ProbePoint {
    pub plain_obs: Observation,
    pub plain_instruction: Vec<u16>,
    pub annotated_obs: Observation,
    pub annotated_instruction: Vec<u16>,
    pub rollout: u64,
    pub timestep: usize,
}

/// Sample paired probe points from a dataset's training split.
pub fn sample_probe_points(ds: &crate::datagen::Dataset, n: usize, seed: u64) -> Vec<ProbePoint> {
    use rand::seq::SliceRandom;
    let paired = ds.paired_indices(false);
    let mut rng = stream_rng(seed, "probe-points");
    let chosen: Vec<&(usize, usize)> = paired.choose_multiple(&mut rng, n.min(paired.len())).collect();
    chosen
        .into_iter()
        .map(|&(ci, ti)| {
            let cs = &ds.instr_samples[ci];
            let ts = &ds.tracked_samples[ti];
            ProbePoint {
                plain_obs: ds.observe(cs.traj_id, cs.t),
                plain_instruction: cs.instruction.clone(),
                annotated_obs: ds.annotated_observe(ts),
                annotated_instruction: ts.track_instruction.clone(),
                rollout: cs.traj_id as u64,
                timestep: cs.t,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageInput {
    Plain,
    Annotated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageVcRow {
    pub stage: String,
    pub input_mode: StageInput,
    pub summary: VcSummary,
}

/// Probe a named stage checkpoint on its proper input mode over a set of
/// probe points. The same distortion seed is reused per point across stages
/// so stage comparisons are paired.
pub fn stage_profiles(
    model: &PolicyModel,
    input: StageInput,
    points: &[ProbePoint],
    schedule: &DiffusionSchedule,
    master_seed: u64,
) -> Result<Vec<VcProfile>> {
    let profiles: Result<Vec<VcProfile>> = points
        .par_iter()
        .enumerate()
        .map(|(i, pt)| {
            let (obs, instr) = match input {
                StageInput::Plain => (&pt.plain_obs, &pt.plain_instruction),
                StageInput::Annotated => (&pt.annotated_obs, &pt.annotated_instruction),
            };
            let seed = master_seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(i as u64);
            let mut p = vc_profile(model, obs, instr, schedule, seed)?;
            p.rollout = pt.rollout;
            p.timestep = pt.timestep;
            Ok(p)
        })
        .collect();
    profiles
}

/// Per-stage cohort=all summaries on the stage's proper input mode.
/// Stage 1 reads track-annotated inputs, stages 0 and 2 read plain inputs.
pub fn stage_comparison(
    stages: &[(String, &PolicyModel)],
    points: &[ProbePoint],
    schedule: &DiffusionSchedule,
    master_seed: u64,
) -> Result<Vec<StageVcRow>> {
    let mut rows = Vec::with_capacity(stages.len());
    for (name, model) in stages {
        let input = if name == "stage1" {
            StageInput::Annotated
        } else {
            StageInput::Plain
        };
        let profiles = stage_profiles(model, input, points, schedule, master_seed)?;
        let summary = cohort_summary(&profiles, Cohort::All)?;
        rows.push(StageVcRow {
            stage: name.clone(),
            input_mode: input,
            summary,
        });
    }
    Ok(rows)
}

/// Stable CSV header for profile exports.
pub const PROFILE_CSV_HEADER: &str = "stage,cohort,rollout,t,position,kl";
/// Stable CSV header for summary exports.
pub const SUMMARY_CSV_HEADER: &str = "stage,cohort,position,mean,std,count";

pub fn profiles_to_csv(stage: &str, cohort: Cohort, profiles: &[VcProfile]) -> String {
    let mut out = String::new();
    for p in profiles {
        for (pos, &kl) in p.kl.iter().enumerate() {
            out.push_str(&format!(
                "{stage},{},{},{},{pos},{kl:.12e}\n",
                cohort.label(),
                p.rollout,
                p.timestep
            ));
        }
    }
    out
}

pub fn summary_to_csv(stage: &str, summary: &VcSummary) -> String {
    let mut out = String::new();
    for pos in 0..summary.mean.len() {
        out.push_str(&format!(
            "{stage},{},{pos},{:.12e},{:.12e},{}\n",
            summary.cohort.label(),
            summary.mean[pos],
            summary.std[pos],
            summary.count
        ));
    }
    out
}
