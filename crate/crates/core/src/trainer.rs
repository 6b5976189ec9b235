//! Shared training machinery: optimizers, the divergence guard, periodic
//! state persistence, and resume.
//!
//! Every stage trainer drives a [`TrainerHarness`]: one RNG stream feeds all
//! in-loop randomness, exactly one metrics line is written per step, and the
//! full (parameters, optimizer, RNG) state persists every `checkpoint_every`
//! steps so an interrupted run resumes onto the identical trajectory.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_train_state, save_train_state, MetricsWriter, TrainState};
use crate::policy::{GradientBundle, PolicyModel};
use crate::rng::{stream_rng, RngState};

/// Divergence guard: abort when the loss stays above this for a sustained
/// window of steps.
pub const DIVERGENCE_THRESHOLD: f64 = 10.0 * std::f64::consts::LN_2;
pub const DIVERGENCE_WINDOW: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

const MOMENTUM_BETA: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptState {
    pub kind: OptimizerKind,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Momentum => (vec![0.0; n_params], Vec::new()),
            OptimizerKind::Adam => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        OptState { kind, m, v, t: 0 }
    }

    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Momentum => {
                for ((p, m), &g) in params.iter_mut().zip(&mut self.m).zip(grads) {
                    *m = MOMENTUM_BETA * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Where a training invocation reads and writes its loop state.
#[derive(Debug, Clone, Copy)]
pub struct TrainIo<'a> {
    pub metrics_path: &'a Path,
    /// Resume-state file; written every `checkpoint_every` steps and removed
    /// on completion. `None` disables resumability.
    pub state_path: Option<&'a Path>,
    /// Pause once this absolute step count is reached, persisting state but
    /// not finalizing. A later invocation resumes onto the identical
    /// trajectory. `None` runs to completion.
    pub stop_after: Option<u64>,
}

impl<'a> TrainIo<'a> {
    pub fn new(metrics_path: &'a Path, state_path: Option<&'a Path>) -> Self {
        TrainIo { metrics_path, state_path, stop_after: None }
    }
}

/// Outcome of one training invocation.
#[derive(Debug)]
pub struct TrainRun {
    pub model: PolicyModel,
    /// False when the run paused at `stop_after` before reaching its step
    /// budget.
    pub completed: bool,
}

/// Stage-agnostic step hyperparameters.
#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub stage: String,
    pub steps: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: u64,
    pub seed: u64,
}

pub struct TrainerHarness {
    pub model: PolicyModel,
    pub rng: ChaCha12Rng,
    pub step: u64,
    pub metrics: MetricsWriter,
    cfg: LoopConfig,
    opt: OptState,
    state_path: Option<PathBuf>,
    high_loss_streak: u64,
}

impl TrainerHarness {
    /// Start fresh, or resume from a persisted state file when one exists
    /// for this stage with fewer steps than requested.
    pub fn create(
        cfg: LoopConfig,
        model: PolicyModel,
        metrics_path: &Path,
        state_path: Option<&Path>,
    ) -> Result<Self> {
        let n = model.params.len();
        if let Some(sp) = state_path {
            if sp.exists() {
                let st = load_train_state(sp)?;
                if st.stage != cfg.stage {
                    return Err(Error::config(format!(
                        "resume state at {} belongs to stage {}, not {}",
                        sp.display(),
                        st.stage,
                        cfg.stage
                    )));
                }
                if st.params.len() != n {
                    return Err(Error::format("resume state parameter shape mismatch"));
                }
                let mut resumed_model = model;
                resumed_model.params = st.params;
                let mut opt = OptState::new(cfg.optimizer, n);
                opt.t = st.step;
                if !st.opt_m.is_empty() {
                    opt.m = st.opt_m;
                }
                if !st.opt_v.is_empty() {
                    opt.v = st.opt_v;
                }
                let metrics = MetricsWriter::resume(metrics_path, st.step)?;
                return Ok(TrainerHarness {
                    model: resumed_model,
                    rng: st.rng.restore(),
                    step: st.step,
                    metrics,
                    opt,
                    state_path: Some(sp.to_path_buf()),
                    cfg,
                    high_loss_streak: 0,
                });
            }
        }
        let rng = stream_rng(cfg.seed, &format!("train-{}", cfg.stage));
        let opt = OptState::new(cfg.optimizer, n);
        let metrics = MetricsWriter::create(metrics_path)?;
        Ok(TrainerHarness {
            model,
            rng,
            step: 0,
            metrics,
            opt,
            state_path: state_path.map(Path::to_path_buf),
            cfg,
            high_loss_streak: 0,
        })
    }

    pub fn steps_remaining(&self) -> u64 {
        self.cfg.steps.saturating_sub(self.step)
    }

    /// Apply one optimizer update and run the divergence guard. The caller
    /// logs its own metrics record (exactly one per step).
    pub fn update(&mut self, loss: f64, grads: &GradientBundle) -> Result<()> {
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss or gradient at step {} of {}",
                self.step, self.cfg.stage
            )));
        }
        if loss > DIVERGENCE_THRESHOLD {
            self.high_loss_streak += 1;
            if self.high_loss_streak >= DIVERGENCE_WINDOW {
                return Err(Error::numerical(format!(
                    "{} diverged: loss {loss:.4} above {DIVERGENCE_THRESHOLD:.4} for {DIVERGENCE_WINDOW} steps (step {})",
                    self.cfg.stage, self.step
                )));
            }
        } else {
            self.high_loss_streak = 0;
        }
        self.opt
            .apply(&mut self.model.params, &grads.data, self.cfg.learning_rate);
        self.step += 1;
        if self.step % self.cfg.checkpoint_every == 0 {
            self.persist()?;
        }
        Ok(())
    }

    pub fn persist(&self) -> Result<()> {
        if let Some(sp) = &self.state_path {
            save_train_state(
                sp,
                &TrainState {
                    stage: self.cfg.stage.clone(),
                    step: self.step,
                    params: self.model.params.clone(),
                    opt_m: self.opt.m.clone(),
                    opt_v: self.opt.v.clone(),
                    rng: RngState::capture(&self.rng),
                },
            )?;
        }
        Ok(())
    }

    /// Remove the resume state after a successful finalization.
    pub fn finish(self) -> Result<PolicyModel> {
        if let Some(sp) = &self.state_path {
            if sp.exists() {
                std::fs::remove_file(sp)?;
            }
        }
        Ok(self.model)
    }

    /// True once the invocation's pause point is reached.
    pub fn should_pause(&self, stop_after: Option<u64>) -> bool {
        stop_after.is_some_and(|s| self.step >= s)
    }

    /// Persist state and hand the model back without finalizing.
    pub fn pause(self) -> Result<PolicyModel> {
        self.persist()?;
        Ok(self.model)
    }
}

/// Draw a shuffled batch of indices from `pool` using the harness RNG.
pub fn sample_batch(rng: &mut ChaCha12Rng, pool: &[usize], batch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    pool.choose_multiple(rng, batch.min(pool.len())).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_and_adam_move_parameters() {
        let mut p = vec![1.0, 2.0];
        let g = vec![0.5, -0.5];
        let mut sgd = OptState::new(OptimizerKind::Sgd, 2);
        sgd.apply(&mut p, &g, 0.1);
        assert!((p[0] - 0.95).abs() < 1e-12);
        assert!((p[1] - 2.05).abs() < 1e-12);

        let mut p = vec![1.0, 2.0];
        let mut adam = OptState::new(OptimizerKind::Adam, 2);
        adam.apply(&mut p, &g, 0.1);
        // First Adam step moves by ~lr in the gradient sign direction.
        assert!(p[0] < 1.0 && p[1] > 2.0);
    }

    #[test]
    fn divergence_guard_trips_after_window() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = LoopConfig {
            stage: "t".into(),
            steps: 10_000,
            learning_rate: 0.0,
            optimizer: OptimizerKind::Sgd,
            checkpoint_every: 1_000_000,
            seed: 0,
        };
        let model = crate::policy::PolicyModel::init(
            crate::policy::forward::tests::tiny_cfg(crate::policy::HeadKind::Discrete),
            1,
        )
        .unwrap();
        let mut h = TrainerHarness::create(cfg, model, &dir.path().join("m.jsonl"), None).unwrap();
        let grads = GradientBundle::zeros(&h.model);
        for _ in 0..DIVERGENCE_WINDOW - 1 {
            h.update(100.0, &grads).unwrap();
        }
        assert!(h.update(100.0, &grads).is_err());
    }
}
