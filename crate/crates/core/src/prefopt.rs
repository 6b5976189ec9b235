//! Stage-1 trainer: in-batch preference pairing and track-following DPO on
//! the discrete policy, against a frozen reference model.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::policy::backward::accumulate_chunk_log_prob_grad;
use crate::policy::forward::{chunk_log_prob, chunk_log_prob_traced};
use crate::policy::math::{sigmoid, softplus};
use crate::policy::{GradientBundle, PolicyModel};
use crate::simenv::Observation;
use crate::trainer::{sample_batch, LoopConfig, OptimizerKind, TrainIo, TrainRun, TrainerHarness};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoConfig {
    /// Temperature on the log-ratio difference.
    pub alpha: f64,
    pub learning_rate: f64,
    /// Batch size; must be even for adjacent-swap pairing.
    pub batch: usize,
    pub steps: u64,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            alpha: 0.1,
            learning_rate: 1e-2,
            batch: 16,
            steps: 200,
            optimizer: OptimizerKind::Sgd,
            checkpoint_every: 500,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::config("dpo alpha must be positive"));
        }
        if self.batch == 0 || self.batch % 2 != 0 {
            return Err(Error::config("dpo batch must be a positive even number"));
        }
        if self.learning_rate <= 0.0 || self.steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("dpo learning_rate/steps/checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// One preference pair over tracked samples: the owner keeps its own chunk
/// as preferred and takes the partner's chunk as dispreferred.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    /// Index into `dataset.tracked_samples` providing inputs and `a_w`.
    pub sample: usize,
    /// Index of the batch partner providing `a_l`.
    pub dispreferred_from: usize,
    pub preferred: Vec<u16>,
    pub dispreferred: Vec<u16>,
}

/// Adjacent-swap pairing of a shuffled even batch: partner of position `i`
/// is `i ^ 1`. Pairs whose chunks collide trigger one batch reshuffle; pairs
/// still colliding afterwards are dropped.
pub fn in_batch_pair(
    dataset: &Dataset,
    batch: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<Vec<PreferencePair>> {
    if batch.len() % 2 != 0 {
        return Err(Error::config(format!("preference batch must be even, got {}", batch.len())));
    }
    let build = |order: &[usize]| -> Vec<PreferencePair> {
        (0..order.len())
            .map(|i| {
                let own = order[i];
                let partner = order[i ^ 1];
                PreferencePair {
                    sample: own,
                    dispreferred_from: partner,
                    preferred: dataset.tracked_samples[own].tokens.clone(),
                    dispreferred: dataset.tracked_samples[partner].tokens.clone(),
                }
            })
            .collect()
    };
    let mut pairs = build(batch);
    if pairs.iter().any(|p| p.preferred == p.dispreferred) {
        let mut reshuffled = batch.to_vec();
        reshuffled.shuffle(rng);
        pairs = build(&reshuffled);
        pairs.retain(|p| p.preferred != p.dispreferred);
    }
    Ok(pairs)
}

/// Frozen-reference chunk log-prob cache, keyed by (input sample, chunk
/// owner). Reference outputs are deterministic so cached values are exact.
pub struct RefCache {
    map: Mutex<HashMap<(usize, usize), f64>>,
}

impl RefCache {
    pub fn new() -> Self {
        RefCache { map: Mutex::new(HashMap::new()) }
    }

    fn get_or_compute(
        &self,
        key: (usize, usize),
        compute: impl FnOnce() -> Result<f64>,
    ) -> Result<f64> {
        if let Some(&v) = self.map.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let v = compute()?;
        self.map.lock().unwrap().insert(key, v);
        Ok(v)
    }
}

impl Default for RefCache {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DpoBatchStats {
    /// Mean of log pi_theta(a_w) - log pi_theta(a_l).
    pub margin: f64,
    /// Fraction of pairs the implicit reward ranks correctly.
    pub reward_acc: f64,
}

struct PairEval {
    loss: f64,
    margin: f64,
    correct: bool,
    grads: Option<GradientBundle>,
}

fn eval_pair(
    policy: &PolicyModel,
    ref_model: &PolicyModel,
    dataset: &Dataset,
    pair: &PreferencePair,
    alpha: f64,
    want_grads: bool,
    cache: &RefCache,
) -> Result<PairEval> {
    let ts = &dataset.tracked_samples[pair.sample];
    let obs = dataset.annotated_observe(ts);
    let instr = &ts.track_instruction;
    let (lw, trace_w) = chunk_log_prob_traced(policy, &obs, instr, &pair.preferred, want_grads)?;
    let (ll, trace_l) = chunk_log_prob_traced(policy, &obs, instr, &pair.dispreferred, want_grads)?;
    let ref_lw = cache.get_or_compute((pair.sample, pair.sample), || {
        chunk_log_prob(ref_model, &obs, instr, &pair.preferred)
    })?;
    let ref_ll = cache.get_or_compute((pair.sample, pair.dispreferred_from), || {
        chunk_log_prob(ref_model, &obs, instr, &pair.dispreferred)
    })?;
    let m = alpha * ((lw - ref_lw) - (ll - ref_ll));
    let loss = softplus(-m);
    let grads = if want_grads {
        let mut g = GradientBundle::zeros(policy);
        let coef = -sigmoid(-m) * alpha;
        accumulate_chunk_log_prob_grad(policy, &obs, instr, &pair.preferred, &trace_w, coef, &mut g)?;
        accumulate_chunk_log_prob_grad(policy, &obs, instr, &pair.dispreferred, &trace_l, -coef, &mut g)?;
        Some(g)
    } else {
        None
    };
    Ok(PairEval { loss, margin: lw - ll, correct: m > 0.0, grads })
}

/// Mean DPO loss over a pair batch: `-log sigmoid(alpha * ((log pi(a_w) -
/// log ref(a_w)) - (log pi(a_l) - log ref(a_l))))`. Gradients flow through
/// the policy terms only.
pub fn dpo_loss_and_grads(
    policy: &PolicyModel,
    ref_model: &PolicyModel,
    dataset: &Dataset,
    pairs: &[PreferencePair],
    alpha: f64,
    cache: &RefCache,
    want_grads: bool,
) -> Result<(f64, Option<GradientBundle>, DpoBatchStats)> {
    if pairs.is_empty() {
        return Err(Error::config("dpo batch has no usable pairs"));
    }
    let evals: Result<Vec<PairEval>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            eval_pair(policy, ref_model, dataset, pair, alpha, want_grads, cache)
                .map_err(|e| Error::numerical(format!("pair {i}: {e}")))
        })
        .collect();
    let evals = evals?;
    let n = evals.len() as f64;
    let loss = evals.iter().map(|e| e.loss).sum::<f64>() / n;
    let stats = DpoBatchStats {
        margin: evals.iter().map(|e| e.margin).sum::<f64>() / n,
        reward_acc: evals.iter().filter(|e| e.correct).count() as f64 / n,
    };
    let grads = if want_grads {
        let mut acc = GradientBundle::zeros(policy);
        for e in &evals {
            acc.add_scaled(e.grads.as_ref().expect("grads requested"), 1.0 / n);
        }
        Some(acc)
    } else {
        None
    };
    Ok((loss, grads, stats))
}

/// The Bradley-Terry implicit reward `alpha * (log pi - log pi_ref)` of one
/// chunk. Evaluation-only; never trained directly.
#[derive(Debug, Clone, Copy)]
pub struct RewardEstimate {
    pub value: f64,
}

pub fn implicit_reward(
    policy: &PolicyModel,
    ref_model: &PolicyModel,
    obs: &Observation,
    instruction: &[u16],
    chunk: &[u16],
    alpha: f64,
) -> Result<RewardEstimate> {
    let lp = chunk_log_prob(policy, obs, instruction, chunk)?;
    let lr = chunk_log_prob(ref_model, obs, instruction, chunk)?;
    Ok(RewardEstimate { value: alpha * (lp - lr) })
}

/// Fraction of pairs where the implicit reward ranks preferred above
/// dispreferred.
pub fn reward_pair_accuracy(
    policy: &PolicyModel,
    ref_model: &PolicyModel,
    dataset: &Dataset,
    pairs: &[PreferencePair],
    alpha: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::config("no pairs to rank"));
    }
    let correct: Result<Vec<bool>> = pairs
        .par_iter()
        .map(|pair| {
            let ts = &dataset.tracked_samples[pair.sample];
            let obs = dataset.annotated_observe(ts);
            let rw = implicit_reward(policy, ref_model, &obs, &ts.track_instruction, &pair.preferred, alpha)?;
            let rl = implicit_reward(policy, ref_model, &obs, &ts.track_instruction, &pair.dispreferred, alpha)?;
            Ok(rw.value > rl.value)
        })
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Build held-out preference pairs by shuffling the holdout split once and
/// applying the same adjacent-swap rule.
pub fn holdout_pairs(dataset: &Dataset, seed: u64) -> Result<Vec<PreferencePair>> {
    let mut pool = dataset.tracked_indices(true);
    if pool.len() < 2 {
        return Err(Error::config("holdout split too small for preference pairs"));
    }
    let mut rng = crate::rng::stream_rng(seed, "holdout-pairs");
    pool.shuffle(&mut rng);
    if pool.len() % 2 != 0 {
        pool.pop();
    }
    in_batch_pair(dataset, &pool, &mut rng)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DpoStepRecord {
    pub step: u64,
    pub loss: f64,
    pub margin: f64,
    pub reward_acc: f64,
}

/// Track-following DPO from a stage-0 model. The reference is a frozen copy
/// of the starting weights.
pub fn train_stage1(
    stage0: &PolicyModel,
    dataset: &Dataset,
    cfg: &DpoConfig,
    seed: u64,
    io: TrainIo,
) -> Result<TrainRun> {
    cfg.validate()?;
    let ref_model = stage0.clone();
    let loop_cfg = LoopConfig {
        stage: "dpo1".into(),
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        optimizer: cfg.optimizer,
        checkpoint_every: cfg.checkpoint_every,
        seed,
    };
    let mut h = TrainerHarness::create(loop_cfg, stage0.clone(), io.metrics_path, io.state_path)?;
    let pool = dataset.tracked_indices(false);
    if pool.len() < cfg.batch {
        return Err(Error::config(format!(
            "track-following training split ({}) smaller than batch ({})",
            pool.len(),
            cfg.batch
        )));
    }
    let cache = RefCache::new();
    while h.steps_remaining() > 0 {
        if h.should_pause(io.stop_after) {
            return Ok(TrainRun { model: h.pause()?, completed: false });
        }
        let mut batch = sample_batch(&mut h.rng, &pool, cfg.batch);
        if batch.len() % 2 != 0 {
            batch.pop();
        }
        let pairs = in_batch_pair(dataset, &batch, &mut h.rng)?;
        let (loss, grads, stats) =
            dpo_loss_and_grads(&h.model, &ref_model, dataset, &pairs, cfg.alpha, &cache, true)?;
        h.metrics.append(&DpoStepRecord {
            step: h.step,
            loss,
            margin: stats.margin,
            reward_acc: stats.reward_acc,
        })?;
        h.update(loss, &grads.expect("grads requested"))?;
    }
    debug_assert_eq!(ref_model.params, stage0.params);
    Ok(TrainRun { model: h.finish()?, completed: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, DataGenConfig};
    use crate::policy::{HeadKind, ModelConfig};
    use crate::simenv::EnvConfig;

    fn tiny_dataset() -> Dataset {
        let mut env = EnvConfig::default();
        env.n_tasks = 2;
        let gen = DataGenConfig { demos_per_task: 3, ..DataGenConfig::default() };
        build_dataset(&env, &gen, 4, 7, 21).unwrap()
    }

    fn tiny_model(ds: &Dataset, seed: u64) -> PolicyModel {
        let cfg = ModelConfig {
            d_action: 3,
            horizon: ds.horizon,
            vocab: ds.vocab,
            width: 16,
            blocks: 1,
            heads: 2,
            mlp_hidden: 32,
            img_h: ds.env.img,
            img_w: ds.env.img,
            channels: 3,
            patch: 8,
            prompt_len: crate::datagen::PROMPT_LEN,
            prompt_vocab: crate::datagen::PROMPT_VOCAB,
            head: HeadKind::Discrete,
        };
        PolicyModel::init(cfg, seed).unwrap()
    }

    #[test]
    fn pairing_sources_follow_adjacent_swap() {
        let ds = tiny_dataset();
        let batch: Vec<usize> = (0..4).collect();
        let mut rng = crate::rng::stream_rng(0, "pair-test");
        let pairs = in_batch_pair(&ds, &batch, &mut rng).unwrap();
        let sources: Vec<usize> = pairs.iter().map(|p| p.dispreferred_from).collect();
        assert_eq!(sources, vec![1, 0, 3, 2]);
        // Involution: partner of partner is self.
        for p in &pairs {
            let partner = pairs.iter().find(|q| q.sample == p.dispreferred_from).unwrap();
            assert_eq!(partner.dispreferred_from, p.sample);
        }
        // No pair keeps identical chunks.
        assert!(pairs.iter().all(|p| p.preferred != p.dispreferred));
    }

    #[test]
    fn odd_batch_is_rejected() {
        let ds = tiny_dataset();
        let mut rng = crate::rng::stream_rng(0, "pair-odd");
        assert!(in_batch_pair(&ds, &[0, 1, 2], &mut rng).is_err());
    }

    #[test]
    fn colliding_pairs_are_dropped_after_one_reshuffle() {
        let mut ds = tiny_dataset();
        // Force every chunk identical: all pairs collide and are dropped.
        let tokens = ds.tracked_samples[0].tokens.clone();
        for s in &mut ds.tracked_samples {
            s.tokens = tokens.clone();
        }
        let mut rng = crate::rng::stream_rng(0, "pair-collide");
        let pairs = in_batch_pair(&ds, &[0, 1, 2, 3], &mut rng).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn dpo_loss_at_reference_equals_ln2_and_reward_is_zero() {
        let ds = tiny_dataset();
        let model = tiny_model(&ds, 3);
        let refm = model.clone();
        let mut rng = crate::rng::stream_rng(1, "dpo-ln2");
        let batch: Vec<usize> = (0..4).collect();
        let pairs = in_batch_pair(&ds, &batch, &mut rng).unwrap();
        let cache = RefCache::new();
        let (loss, _, _) =
            dpo_loss_and_grads(&model, &refm, &ds, &pairs, 0.1, &cache, false).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "loss {loss}");
        let ts = &ds.tracked_samples[0];
        let obs = ds.annotated_observe(ts);
        let r = implicit_reward(&model, &refm, &obs, &ts.track_instruction, &ts.tokens, 0.1).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn reward_is_invariant_to_uniform_logit_shift() {
        let ds = tiny_dataset();
        let model = tiny_model(&ds, 5);
        let refm = tiny_model(&ds, 6);
        let ts = &ds.tracked_samples[1];
        let obs = ds.annotated_observe(ts);
        let base = implicit_reward(&model, &refm, &obs, &ts.track_instruction, &ts.tokens, 0.1).unwrap();
        // Shift every output bias by a constant in both models.
        let mut shifted = model.clone();
        let r = shifted.index.out_b.clone();
        shifted.params[r].iter_mut().for_each(|b| *b += 3.5);
        let mut shifted_ref = refm.clone();
        let r = shifted_ref.index.out_b.clone();
        shifted_ref.params[r].iter_mut().for_each(|b| *b += 3.5);
        let moved =
            implicit_reward(&shifted, &shifted_ref, &obs, &ts.track_instruction, &ts.tokens, 0.1).unwrap();
        assert!((base.value - moved.value).abs() < 1e-9);
    }

    #[test]
    fn margin_increase_decreases_loss_on_synthetic_logits() {
        // Direct evaluation of the closed form: fixed reference terms,
        // growing policy margin.
        let alpha = 0.1;
        let closed = |margin: f64| softplus(-(alpha * margin));
        let mut prev = closed(-2.0);
        for i in 1..20 {
            let cur = closed(-2.0 + i as f64 * 0.5);
            assert!(cur < prev);
            prev = cur;
        }
        // ln 3 margin inside the sigmoid: loss = -ln(0.75).
        let loss = softplus(-(3.0f64.ln()));
        assert!((loss - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn dpo_grad_matches_finite_differences_on_small_model() {
        let ds = tiny_dataset();
        let mut model = tiny_model(&ds, 7);
        let refm = tiny_model(&ds, 8);
        let mut rng = crate::rng::stream_rng(2, "dpo-fd");
        let pairs = in_batch_pair(&ds, &[0, 1], &mut rng).unwrap();
        let cache = RefCache::new();
        let (_, grads, _) =
            dpo_loss_and_grads(&model, &refm, &ds, &pairs, 0.1, &cache, true).unwrap();
        let grads = grads.unwrap();
        let h = 1e-5;
        for pi in (0..model.params.len()).step_by(211) {
            let orig = model.params[pi];
            model.params[pi] = orig + h;
            let (up, _, _) =
                dpo_loss_and_grads(&model, &refm, &ds, &pairs, 0.1, &cache, false).unwrap();
            model.params[pi] = orig - h;
            let (down, _, _) =
                dpo_loss_and_grads(&model, &refm, &ds, &pairs, 0.1, &cache, false).unwrap();
            model.params[pi] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads.data[pi];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() / denom < 1e-4, "param {pi}: {a} vs {fd}");
        }
    }
}
