//! Closed-loop evaluation: receding-horizon rollouts, suite success rates,
//! sequential task chains, and success/failure cohort labeling for the
//! visual-conditioning probe.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{make_prompts, PromptMode};
use crate::error::{Error, Result};
use crate::io::{read_f32s, read_header, read_u16s, write_f32s, write_header, write_u16s, FileKind};
use crate::policy::forward::{decode_greedy, predict_continuous};
use crate::policy::tokenizer::detokenize;
use crate::policy::{HeadKind, PolicyModel};
use crate::probe::ProbeInput;
use crate::rng::stream_rng;
use crate::simenv::{
    init_world, is_success, make_tasks, render, retarget, scripted_expert, step, Action, EnvConfig,
    Observation, TaskSpec, WorldState,
};

/// Receding-horizon control: plan `horizon` actions, execute the first
/// `h_exec`, replan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhcConfig {
    pub horizon: usize,
    pub h_exec: usize,
}

impl RhcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h_exec == 0 || self.h_exec > self.horizon {
            return Err(Error::config(format!(
                "h_exec must satisfy 1 <= h_exec ({}) <= horizon ({})",
                self.h_exec, self.horizon
            )));
        }
        Ok(())
    }
}

/// Anything that can plan an H x D action chunk from the current
/// observation. The world state is available for oracle controllers only.
pub trait Controller: Sync {
    fn plan(&self, state: &WorldState, obs: &Observation, task: &TaskSpec, env: &EnvConfig) -> Result<Vec<f64>>;
    fn name(&self) -> String;
}

/// Wraps a policy checkpoint: discrete models decode greedily and
/// detokenize; continuous models regress directly. Outputs clamp to [-1, 1]
/// at execution time.
pub struct PolicyController<'a> {
    pub model: &'a PolicyModel,
}

impl Controller for PolicyController<'_> {
    fn plan(&self, _state: &WorldState, obs: &Observation, task: &TaskSpec, _env: &EnvConfig) -> Result<Vec<f64>> {
        let instruction = make_prompts(task, PromptMode::Instruction, self.model.cfg.horizon)?;
        match self.model.cfg.head {
            HeadKind::Discrete => {
                let tokens = decode_greedy(self.model, obs, &instruction)?;
                Ok(detokenize(&tokens, self.model.cfg.vocab))
            }
            HeadKind::Continuous => {
                let mut pred = predict_continuous(self.model, obs, &instruction)?;
                for p in &mut pred {
                    *p = p.clamp(-1.0, 1.0);
                }
                Ok(pred)
            }
        }
    }

    fn name(&self) -> String {
        format!("policy-{:?}", self.model.cfg.head)
    }
}

/// The scripted expert wrapped as a chunk planner: it simulates itself
/// `horizon` steps ahead and returns those actions.
pub struct ExpertController {
    pub horizon: usize,
}

impl Controller for ExpertController {
    fn plan(&self, state: &WorldState, _obs: &Observation, task: &TaskSpec, env: &EnvConfig) -> Result<Vec<f64>> {
        let mut sim = state.clone();
        let mut out = Vec::with_capacity(self.horizon * 3);
        for _ in 0..self.horizon {
            let a = scripted_expert(&sim, task, env);
            out.extend_from_slice(&a.delta);
            sim = step(&sim, &a, env);
        }
        Ok(out)
    }

    fn name(&self) -> String {
        "expert".into()
    }
}

/// Degenerate all-zero planner, useful as a failure baseline.
pub struct ZeroController {
    pub horizon: usize,
}

impl Controller for ZeroController {
    fn plan(&self, _: &WorldState, _: &Observation, _: &TaskSpec, _: &EnvConfig) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.horizon * 3])
    }

    fn name(&self) -> String {
        "zero".into()
    }
}

/// One replanning point: the observation the plan was made from, the chunk,
/// and how much of it ran before the next replan.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplanRecord {
    pub t: usize,
    pub obs: Observation,
    pub chunk: Vec<f64>,
    pub tokens: Option<Vec<u16>>,
    pub executed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub rollout_id: u64,
    pub task_id: u32,
    pub seed: u64,
    pub steps: usize,
    pub success: bool,
    pub replans: Vec<ReplanRecord>,
}

impl RolloutRecord {
    pub fn replan_count(&self) -> usize {
        self.replans.len()
    }
}

/// Closed-loop rollout from an explicit initial state.
pub fn rollout_from(
    ctrl: &dyn Controller,
    mut state: WorldState,
    task: &TaskSpec,
    env: &EnvConfig,
    rhc: RhcConfig,
    max_steps: usize,
    seed: u64,
    rollout_id: u64,
) -> Result<(RolloutRecord, WorldState)> {
    rhc.validate()?;
    let d = 3;
    let mut steps = 0usize;
    let mut replans = Vec::new();
    let mut success = is_success(&state, task);
    while !success && steps < max_steps {
        let obs = render(&state, env);
        let chunk = ctrl.plan(&state, &obs, task, env).map_err(|e| {
            Error::numerical(format!("controller failed at step {steps}: {e}"))
        })?;
        if chunk.len() != rhc.horizon * d {
            return Err(Error::config(format!(
                "controller returned {} values, expected {}",
                chunk.len(),
                rhc.horizon * d
            )));
        }
        let mut executed = 0usize;
        for k in 0..rhc.h_exec {
            if steps >= max_steps {
                break;
            }
            let a = Action {
                delta: [
                    chunk[k * d].clamp(-1.0, 1.0),
                    chunk[k * d + 1].clamp(-1.0, 1.0),
                    chunk[k * d + 2].clamp(-1.0, 1.0),
                ],
            };
            state = step(&state, &a, env);
            steps += 1;
            executed += 1;
            if is_success(&state, task) {
                success = true;
                break;
            }
        }
        replans.push(ReplanRecord { t: steps - executed, obs, chunk, tokens: None, executed });
    }
    Ok((
        RolloutRecord {
            rollout_id,
            task_id: task.task_id,
            seed,
            steps,
            success,
            replans,
        },
        state,
    ))
}

/// Rollout from a fresh jittered episode of `task`.
pub fn rollout(
    ctrl: &dyn Controller,
    task: &TaskSpec,
    env: &EnvConfig,
    rhc: RhcConfig,
    max_steps: usize,
    seed: u64,
    rollout_id: u64,
) -> Result<RolloutRecord> {
    let mut rng = stream_rng(seed, &format!("episode-{}", task.task_id));
    let state = init_world(task, env, &mut rng);
    rollout_from(ctrl, state, task, env, rhc, max_steps, seed, rollout_id).map(|(r, _)| r)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResult {
    pub per_task: Vec<TaskResult>,
    pub mean_sr: f64,
    pub episodes_per_task: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: u32,
    pub success_rate: f64,
}

/// Per-task success rates over seeded episodes. Episodes run in parallel;
/// aggregation is an ordered reduce over (task, episode).
pub fn evaluate_suite(
    ctrl: &dyn Controller,
    env: &EnvConfig,
    rhc: RhcConfig,
    episodes_per_task: usize,
    max_steps: usize,
    seed: u64,
) -> Result<(SuiteResult, Vec<RolloutRecord>)> {
    if episodes_per_task == 0 {
        return Err(Error::config("episodes_per_task must be positive"));
    }
    let tasks = make_tasks(env);
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..episodes_per_task).map(move |e| (t, e)))
        .collect();
    let records: Result<Vec<RolloutRecord>> = jobs
        .par_iter()
        .map(|&(t, e)| {
            let task = &tasks[t];
            let ep_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((t * episodes_per_task + e) as u64);
            rollout(
                ctrl,
                task,
                env,
                rhc,
                max_steps,
                ep_seed,
                (t * episodes_per_task + e) as u64,
            )
        })
        .collect();
    let records = records?;
    let mut per_task = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let slice = &records[t * episodes_per_task..(t + 1) * episodes_per_task];
        let wins = slice.iter().filter(|r| r.success).count();
        per_task.push(TaskResult {
            task_id: task.task_id,
            success_rate: wins as f64 / episodes_per_task as f64,
        });
    }
    let mean_sr = per_task.iter().map(|t| t.success_rate).sum::<f64>() / per_task.len() as f64;
    Ok((SuiteResult { per_task, mean_sr, episodes_per_task }, records))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainRecord {
    pub chain_id: u64,
    pub task_ids: Vec<u32>,
    pub completed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSummary {
    pub n_chains: usize,
    pub chain_len: usize,
    pub avg_len: f64,
    /// Fraction of chains completing at least k+1 tasks, k = 0..chain_len.
    pub per_position: Vec<f64>,
    pub chains: Vec<ChainRecord>,
}

/// Sequential task chains: each task starts from the previous final state,
/// the chain stops at the first failure. Tasks are sampled without
/// immediate repetition.
pub fn evaluate_chains(
    ctrl: &dyn Controller,
    env: &EnvConfig,
    rhc: RhcConfig,
    n_chains: usize,
    chain_len: usize,
    max_steps_per_task: usize,
    seed: u64,
) -> Result<ChainSummary> {
    if n_chains == 0 || chain_len == 0 {
        return Err(Error::config("n_chains and chain_len must be positive"));
    }
    let tasks = make_tasks(env);
    let chains: Result<Vec<ChainRecord>> = (0..n_chains)
        .into_par_iter()
        .map(|c| {
            use rand::Rng;
            let mut rng = stream_rng(seed, &format!("chain-{c}"));
            let mut ids: Vec<u32> = Vec::with_capacity(chain_len);
            for k in 0..chain_len {
                loop {
                    let id = rng.gen_range(0..tasks.len()) as u32;
                    if k == 0 || ids[k - 1] != id {
                        ids.push(id);
                        break;
                    }
                }
            }
            let mut completed = 0usize;
            let mut state = init_world(&tasks[ids[0] as usize], env, &mut rng);
            for (k, &tid) in ids.iter().enumerate() {
                let task = &tasks[tid as usize];
                if k > 0 {
                    state = retarget(&state, task, env, &mut rng);
                }
                let (rec, final_state) = rollout_from(
                    ctrl,
                    state,
                    task,
                    env,
                    rhc,
                    max_steps_per_task,
                    seed,
                    c as u64,
                )?;
                state = final_state;
                if rec.success {
                    completed += 1;
                } else {
                    break;
                }
            }
            Ok(ChainRecord { chain_id: c as u64, task_ids: ids, completed })
        })
        .collect();
    let chains = chains?;
    let avg_len = chains.iter().map(|c| c.completed as f64).sum::<f64>() / n_chains as f64;
    let per_position = (0..chain_len)
        .map(|k| chains.iter().filter(|c| c.completed >= k + 1).count() as f64 / n_chains as f64)
        .collect();
    Ok(ChainSummary { n_chains, chain_len, avg_len, per_position, chains })
}

/// Disjoint, exhaustive success/failure partition of rollout records.
pub fn label_cohorts(records: &[RolloutRecord]) -> (Vec<&RolloutRecord>, Vec<&RolloutRecord>) {
    let success: Vec<&RolloutRecord> = records.iter().filter(|r| r.success).collect();
    let failure: Vec<&RolloutRecord> = records.iter().filter(|r| !r.success).collect();
    (success, failure)
}

/// Turn rollout records into probe inputs, one per replan point (subsampled
/// by `stride`), carrying the episode's success flag.
pub fn probe_inputs_from_records(
    records: &[RolloutRecord],
    env: &EnvConfig,
    horizon: usize,
    stride: usize,
) -> Result<Vec<ProbeInput>> {
    let stride = stride.max(1);
    let tasks = make_tasks(env);
    let mut out = Vec::new();
    for rec in records {
        let task = tasks
            .iter()
            .find(|t| t.task_id == rec.task_id)
            .ok_or_else(|| Error::config(format!("unknown task id {}", rec.task_id)))?;
        let instruction = make_prompts(task, PromptMode::Instruction, horizon)?;
        for (i, rp) in rec.replans.iter().enumerate() {
            if i % stride != 0 {
                continue;
            }
            out.push(ProbeInput {
                obs: rp.obs.clone(),
                instruction: instruction.clone(),
                rollout: rec.rollout_id,
                timestep: rp.t,
                success: Some(rec.success),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rollout record persistence: JSONL metadata plus a binary snapshot file
// holding the per-replan pixels for probe replay.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RecordMeta {
    rollout_id: u64,
    task_id: u32,
    seed: u64,
    steps: usize,
    success: bool,
    replan_ts: Vec<usize>,
    replan_executed: Vec<usize>,
}

pub fn save_rollout_records(jsonl_path: &Path, snapshot_path: &Path, records: &[RolloutRecord]) -> Result<()> {
    let mut meta = BufWriter::new(File::create(jsonl_path)?);
    for rec in records {
        let m = RecordMeta {
            rollout_id: rec.rollout_id,
            task_id: rec.task_id,
            seed: rec.seed,
            steps: rec.steps,
            success: rec.success,
            replan_ts: rec.replans.iter().map(|r| r.t).collect(),
            replan_executed: rec.replans.iter().map(|r| r.executed).collect(),
        };
        meta.write_all(serde_json::to_string(&m)?.as_bytes())?;
        meta.write_all(b"\n")?;
    }
    meta.flush()?;

    let mut w = BufWriter::new(File::create(snapshot_path)?);
    write_header(&mut w, FileKind::Snapshots)?;
    w.write_u32::<LittleEndian>(records.len() as u32)?;
    for rec in records {
        w.write_u64::<LittleEndian>(rec.rollout_id)?;
        w.write_u32::<LittleEndian>(rec.task_id)?;
        w.write_u64::<LittleEndian>(rec.seed)?;
        w.write_u64::<LittleEndian>(rec.steps as u64)?;
        w.write_u8(rec.success as u8)?;
        w.write_u32::<LittleEndian>(rec.replans.len() as u32)?;
        for rp in &rec.replans {
            w.write_u32::<LittleEndian>(rp.t as u32)?;
            w.write_u32::<LittleEndian>(rp.executed as u32)?;
            w.write_u32::<LittleEndian>(rp.obs.height as u32)?;
            w.write_u32::<LittleEndian>(rp.obs.width as u32)?;
            w.write_u32::<LittleEndian>(rp.obs.channels as u32)?;
            let px: Vec<f32> = rp.obs.pixels.iter().map(|&p| p as f32).collect();
            write_f32s(&mut w, &px)?;
            crate::io::write_f64s(&mut w, &rp.chunk)?;
            write_u16s(&mut w, rp.tokens.as_deref().unwrap_or(&[]))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_rollout_records(snapshot_path: &Path) -> Result<Vec<RolloutRecord>> {
    let mut r = BufReader::new(File::open(snapshot_path).map_err(|e| {
        Error::MissingLineage(format!("{}: {e}", snapshot_path.display()))
    })?);
    read_header(&mut r, FileKind::Snapshots)?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let rollout_id = r.read_u64::<LittleEndian>()?;
        let task_id = r.read_u32::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let steps = r.read_u64::<LittleEndian>()? as usize;
        let success = {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            b[0] != 0
        };
        let n_replans = r.read_u32::<LittleEndian>()? as usize;
        let mut replans = Vec::with_capacity(n_replans);
        for _ in 0..n_replans {
            let t = r.read_u32::<LittleEndian>()? as usize;
            let executed = r.read_u32::<LittleEndian>()? as usize;
            let height = r.read_u32::<LittleEndian>()? as usize;
            let width = r.read_u32::<LittleEndian>()? as usize;
            let channels = r.read_u32::<LittleEndian>()? as usize;
            let px = read_f32s(&mut r)?;
            if px.len() != height * width * channels {
                return Err(Error::format("snapshot pixel count mismatch"));
            }
            let chunk = crate::io::read_f64s(&mut r)?;
            let tokens = read_u16s(&mut r)?;
            replans.push(ReplanRecord {
                t,
                obs: Observation {
                    height,
                    width,
                    channels,
                    pixels: px.iter().map(|&p| p as f64).collect(),
                },
                chunk,
                tokens: if tokens.is_empty() { None } else { Some(tokens) },
                executed,
            });
        }
        records.push(RolloutRecord { rollout_id, task_id, seed, steps, success, replans });
    }
    Ok(records)
}
