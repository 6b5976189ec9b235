//! Supervised fine-tuning and latent-space distillation.
//!
//! Stage 0 is plain SFT on instruction-following data. Stage 2 re-runs SFT
//! while pulling the student's backbone latents (on plain inputs) toward the
//! frozen track-aligned teacher's latents (on track-annotated inputs).
//! The two ablation baselines reuse the same machinery: DPO-then-SFT is
//! stage 2 with the distillation weight at zero, Co-SFT is single-stage SFT
//! over the union of both sample sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::policy::backward::{accumulate_chunk_log_prob_grad, backward, BackwardSeed};
use crate::policy::forward::{forward_full, forward_latents, SlotFill};
use crate::policy::math::{axpy, dot};
use crate::policy::{GradientBundle, HeadKind, PolicyModel};
use crate::simenv::Observation;
use crate::trainer::{sample_batch, LoopConfig, OptimizerKind, TrainIo, TrainRun, TrainerHarness};

/// Norm floor below which a latent counts as zero and its cosine term is 0.
pub const COSINE_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    NegCosine,
    L2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: u64,
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.learning_rate <= 0.0 || self.checkpoint_every == 0 {
            return Err(Error::config("sft steps/batch/learning_rate/checkpoint_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Distillation weight gamma.
    pub gamma: f64,
    pub sim_kind: SimKind,
    pub student_head: HeadKind,
    pub learning_rate: f64,
    pub batch: usize,
    pub steps: u64,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: u64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::config("gamma must be non-negative"));
        }
        if self.steps == 0 || self.batch == 0 || self.learning_rate <= 0.0 || self.checkpoint_every == 0 {
            return Err(Error::config("distill steps/batch/learning_rate/checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// A supervised item: either a plain instruction-following sample or a
/// track-annotated one (used by Co-SFT's data mixture).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SftItem {
    Plain(usize),
    Tracked(usize),
}

fn item_view(dataset: &Dataset, item: SftItem) -> (Observation, Vec<u16>, Vec<f64>, Vec<u16>) {
    match item {
        SftItem::Plain(i) => {
            let s = &dataset.instr_samples[i];
            (
                dataset.observe(s.traj_id, s.t),
                s.instruction.clone(),
                s.actions.clone(),
                s.tokens.clone(),
            )
        }
        SftItem::Tracked(i) => {
            let s = &dataset.tracked_samples[i];
            (
                dataset.annotated_observe(s),
                s.track_instruction.clone(),
                s.actions.clone(),
                s.tokens.clone(),
            )
        }
    }
}

struct ItemEval {
    loss: f64,
    grads: Option<GradientBundle>,
}

/// Standard SFT loss: mean per-token negative log-likelihood for discrete
/// students, mean absolute error over the H x D entries for continuous ones.
pub fn sft_loss_and_grads(
    student: &PolicyModel,
    dataset: &Dataset,
    items: &[SftItem],
    want_grads: bool,
) -> Result<(f64, Option<GradientBundle>)> {
    if items.is_empty() {
        return Err(Error::config("sft batch is empty"));
    }
    let n = items.len() as f64;
    let m = student.cfg.m_tokens() as f64;
    let evals: Result<Vec<ItemEval>> = items
        .par_iter()
        .map(|&item| {
            let (obs, instr, actions, tokens) = item_view(dataset, item);
            match student.cfg.head {
                HeadKind::Discrete => {
                    let (lp, trace) = crate::policy::forward::chunk_log_prob_traced(
                        student, &obs, &instr, &tokens, want_grads,
                    )?;
                    let grads = if want_grads {
                        let mut g = GradientBundle::zeros(student);
                        accumulate_chunk_log_prob_grad(
                            student, &obs, &instr, &tokens, &trace, -1.0 / (n * m), &mut g,
                        )?;
                        Some(g)
                    } else {
                        None
                    };
                    Ok(ItemEval { loss: -lp / m, grads })
                }
                HeadKind::Continuous => {
                    let trace = forward_full(student, &obs, &instr, SlotFill::Start, want_grads)?;
                    let pred = &trace.cont.as_ref().expect("continuous head ran").layers[3].1;
                    let loss = pred
                        .iter()
                        .zip(&actions)
                        .map(|(p, a)| (p - a).abs())
                        .sum::<f64>()
                        / m;
                    let grads = if want_grads {
                        let d_pred: Vec<f64> = pred
                            .iter()
                            .zip(&actions)
                            .map(|(p, a)| {
                                let d = p - a;
                                if d > 0.0 {
                                    1.0
                                } else if d < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            })
                            .map(|s| s / (n * m))
                            .collect();
                        let mut g = GradientBundle::zeros(student);
                        backward(student, &obs, &instr, &trace, BackwardSeed::Continuous(&d_pred), &mut g)?;
                        Some(g)
                    } else {
                        None
                    };
                    Ok(ItemEval { loss, grads })
                }
            }
        })
        .collect();
    let evals = evals?;
    let loss = evals.iter().map(|e| e.loss).sum::<f64>() / n;
    let grads = reduce_grads(student, &evals, want_grads);
    Ok((loss, grads))
}

fn reduce_grads(model: &PolicyModel, evals: &[ItemEval], want: bool) -> Option<GradientBundle> {
    if !want {
        return None;
    }
    let mut acc = GradientBundle::zeros(model);
    for e in evals {
        acc.add_scaled(e.grads.as_ref().expect("grads requested"), 1.0);
    }
    Some(acc)
}

/// Per-position similarity between student latents on plain inputs and
/// frozen teacher latents on annotated inputs. Negative mean cosine or mean
/// squared distance over the M positions.
pub fn distill_loss_and_grads(
    student: &PolicyModel,
    teacher: &PolicyModel,
    dataset: &Dataset,
    pairs: &[(usize, usize)],
    sim_kind: SimKind,
    want_grads: bool,
) -> Result<(f64, Option<GradientBundle>)> {
    if pairs.is_empty() {
        return Err(Error::config("distill batch is empty"));
    }
    if student.cfg.width != teacher.cfg.width || student.cfg.m_tokens() != teacher.cfg.m_tokens() {
        return Err(Error::config(format!(
            "latent shape mismatch: student {}x{}, teacher {}x{}",
            student.cfg.m_tokens(),
            student.cfg.width,
            teacher.cfg.m_tokens(),
            teacher.cfg.width
        )));
    }
    let n = pairs.len() as f64;
    let m = student.cfg.m_tokens();
    let w = student.cfg.width;
    let evals: Result<Vec<ItemEval>> = pairs
        .par_iter()
        .map(|&(ci, ti)| {
            let cs = &dataset.instr_samples[ci];
            let ts = &dataset.tracked_samples[ti];
            let plain_obs = dataset.observe(cs.traj_id, cs.t);
            let ann_obs = dataset.annotated_observe(ts);
            let trace = forward_full(student, &plain_obs, &cs.instruction, SlotFill::Start, want_grads)?;
            let s_lat = trace.latents(student);
            let t_lat = forward_latents(teacher, &ann_obs, &ts.track_instruction)?;
            let mut loss = 0.0;
            let mut d_lat = vec![0.0; m * w];
            for tau in 0..m {
                let s = s_lat.row(tau);
                let t = t_lat.row(tau);
                match sim_kind {
                    SimKind::NegCosine => {
                        let ns = dot(s, s).sqrt();
                        let nt = dot(t, t).sqrt();
                        if ns < COSINE_NORM_EPS || nt < COSINE_NORM_EPS {
                            continue;
                        }
                        let cosv = dot(s, t) / (ns * nt);
                        loss += -cosv;
                        if want_grads {
                            let drow = &mut d_lat[tau * w..(tau + 1) * w];
                            // d(-cos)/ds = -(t/(|s||t|) - cos * s/|s|^2)
                            axpy(drow, -1.0 / (ns * nt), t);
                            axpy(drow, cosv / (ns * ns), s);
                        }
                    }
                    SimKind::L2 => {
                        let mut d2 = 0.0;
                        for (a, b) in s.iter().zip(t) {
                            d2 += (a - b) * (a - b);
                        }
                        loss += d2;
                        if want_grads {
                            let drow = &mut d_lat[tau * w..(tau + 1) * w];
                            axpy(drow, 2.0, s);
                            axpy(drow, -2.0, t);
                        }
                    }
                }
            }
            loss /= m as f64;
            let grads = if want_grads {
                for d in &mut d_lat {
                    *d /= n * m as f64;
                }
                let mut g = GradientBundle::zeros(student);
                backward(student, &plain_obs, &cs.instruction, &trace, BackwardSeed::Latents(&d_lat), &mut g)?;
                Some(g)
            } else {
                None
            };
            Ok(ItemEval { loss, grads })
        })
        .collect();
    let evals = evals?;
    let loss = evals.iter().map(|e| e.loss).sum::<f64>() / n;
    let grads = reduce_grads(student, &evals, want_grads);
    Ok((loss, grads))
}

/// Exact weighted sum `total = sft + gamma * distill` with linearly
/// decomposing gradients. With gamma = 0 the distillation term is skipped
/// entirely and reported as `None`.
pub fn total_loss_and_grads(
    student: &PolicyModel,
    teacher: Option<&PolicyModel>,
    dataset: &Dataset,
    pairs: &[(usize, usize)],
    gamma: f64,
    sim_kind: SimKind,
    want_grads: bool,
) -> Result<(f64, f64, Option<f64>, Option<GradientBundle>)> {
    let sft_items: Vec<SftItem> = pairs.iter().map(|&(ci, _)| SftItem::Plain(ci)).collect();
    let (sft, sft_grads) = sft_loss_and_grads(student, dataset, &sft_items, want_grads)?;
    if gamma == 0.0 {
        return Ok((sft, sft, None, sft_grads));
    }
    let teacher = teacher.ok_or_else(|| Error::config("distillation requires a teacher model"))?;
    let (dl, dl_grads) = distill_loss_and_grads(student, teacher, dataset, pairs, sim_kind, want_grads)?;
    let total = sft + gamma * dl;
    let grads = if want_grads {
        let mut g = sft_grads.expect("grads requested");
        g.add_scaled(dl_grads.as_ref().expect("grads requested"), gamma);
        Some(g)
    } else {
        None
    };
    Ok((total, sft, Some(dl), grads))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SftStepRecord {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DistillStepRecord {
    pub step: u64,
    pub total: f64,
    pub sft: f64,
    pub distill: Option<f64>,
}

/// Stage 0: instruction-following SFT from random initialization.
pub fn train_stage0(
    model_cfg: &crate::policy::ModelConfig,
    dataset: &Dataset,
    cfg: &SftConfig,
    seed: u64,
    io: TrainIo,
) -> Result<TrainRun> {
    cfg.validate()?;
    let model = PolicyModel::init(model_cfg.clone(), seed)?;
    let pool: Vec<SftItem> = dataset.instr_indices(false).into_iter().map(SftItem::Plain).collect();
    run_sft_loop("sft0", model, dataset, pool, cfg, seed, io)
}

/// Co-SFT baseline: one SFT pass over the union of plain and track-annotated
/// samples, distinguished by their prompt mode tokens.
pub fn train_co_sft(
    model_cfg: &crate::policy::ModelConfig,
    dataset: &Dataset,
    cfg: &SftConfig,
    seed: u64,
    io: TrainIo,
) -> Result<TrainRun> {
    cfg.validate()?;
    let model = PolicyModel::init(model_cfg.clone(), seed)?;
    let mut pool: Vec<SftItem> = dataset.instr_indices(false).into_iter().map(SftItem::Plain).collect();
    pool.extend(dataset.tracked_indices(false).into_iter().map(SftItem::Tracked));
    run_sft_loop("co_sft", model, dataset, pool, cfg, seed, io)
}

fn run_sft_loop(
    stage: &str,
    model: PolicyModel,
    dataset: &Dataset,
    pool: Vec<SftItem>,
    cfg: &SftConfig,
    seed: u64,
    io: TrainIo,
) -> Result<TrainRun> {
    if pool.len() < cfg.batch {
        return Err(Error::config(format!(
            "{stage}: training pool ({}) smaller than batch ({})",
            pool.len(),
            cfg.batch
        )));
    }
    let loop_cfg = LoopConfig {
        stage: stage.to_string(),
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        optimizer: cfg.optimizer,
        checkpoint_every: cfg.checkpoint_every,
        seed,
    };
    let mut h = TrainerHarness::create(loop_cfg, model, io.metrics_path, io.state_path)?;
    let indices: Vec<usize> = (0..pool.len()).collect();
    while h.steps_remaining() > 0 {
        if h.should_pause(io.stop_after) {
            return Ok(TrainRun { model: h.pause()?, completed: false });
        }
        let picks = sample_batch(&mut h.rng, &indices, cfg.batch);
        let items: Vec<SftItem> = picks.iter().map(|&i| pool[i]).collect();
        let (loss, grads) = sft_loss_and_grads(&h.model, dataset, &items, true)?;
        h.metrics.append(&SftStepRecord { step: h.step, loss })?;
        h.update(loss, &grads.expect("grads requested"))?;
    }
    Ok(TrainRun { model: h.finish()?, completed: true })
}

/// Stage 2: SFT with latent distillation from the frozen stage-1 teacher.
/// A discrete student starts from the teacher's weights; a continuous
/// student copies the backbone where shapes match and gets a fresh
/// regression head with a zero final layer.
pub fn train_stage2(
    teacher: &PolicyModel,
    dataset: &Dataset,
    cfg: &DistillConfig,
    seed: u64,
    io: TrainIo,
) -> Result<TrainRun> {
    cfg.validate()?;
    let student = match cfg.student_head {
        HeadKind::Discrete => teacher.clone(),
        HeadKind::Continuous => {
            let mut scfg = teacher.cfg.clone();
            scfg.head = HeadKind::Continuous;
            let mut s = PolicyModel::init(scfg, seed)?;
            s.copy_matching_from(teacher);
            s
        }
    };
    let pairs_pool = dataset.paired_indices(false);
    if pairs_pool.len() < cfg.batch {
        return Err(Error::config(format!(
            "paired training split ({}) smaller than batch ({})",
            pairs_pool.len(),
            cfg.batch
        )));
    }
    let loop_cfg = LoopConfig {
        stage: "distill2".into(),
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        optimizer: cfg.optimizer,
        checkpoint_every: cfg.checkpoint_every,
        seed,
    };
    let mut h = TrainerHarness::create(loop_cfg, student, io.metrics_path, io.state_path)?;
    let indices: Vec<usize> = (0..pairs_pool.len()).collect();
    let teacher_ref = if cfg.gamma > 0.0 { Some(teacher) } else { None };
    while h.steps_remaining() > 0 {
        if h.should_pause(io.stop_after) {
            return Ok(TrainRun { model: h.pause()?, completed: false });
        }
        let picks = sample_batch(&mut h.rng, &indices, cfg.batch);
        let batch: Vec<(usize, usize)> = picks.iter().map(|&i| pairs_pool[i]).collect();
        let (total, sft, distill, grads) = total_loss_and_grads(
            &h.model,
            teacher_ref,
            dataset,
            &batch,
            cfg.gamma,
            cfg.sim_kind,
            true,
        )?;
        h.metrics.append(&DistillStepRecord { step: h.step, total, sft, distill })?;
        h.update(total, &grads.expect("grads requested"))?;
    }
    Ok(TrainRun { model: h.finish()?, completed: true })
}
