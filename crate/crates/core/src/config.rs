//! Run configuration: one human-editable TOML file per run. Unknown keys
//! are rejected, every field is validated against module constraints at
//! load, and the canonical serialization round-trips byte-for-byte.

use serde::{Deserialize, Serialize};

use crate::datagen::DataGenConfig;
use crate::distill::{DistillConfig, SftConfig, SimKind};
use crate::error::{Error, Result};
use crate::policy::{HeadKind, ModelConfig};
use crate::prefopt::DpoConfig;
use crate::simenv::EnvConfig;
use crate::trainer::OptimizerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_action: usize,
    pub horizon: usize,
    pub vocab: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_action: 3,
            horizon: 8,
            vocab: 21,
            width: 64,
            blocks: 2,
            heads: 4,
            mlp_hidden: 256,
            patch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub episodes_per_task: usize,
    pub h_exec: usize,
    pub max_steps: usize,
    pub n_chains: usize,
    pub chain_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes_per_task: 25,
            h_exec: 4,
            max_steps: 96,
            n_chains: 100,
            chain_len: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub k: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Dataset timesteps sampled for stage comparisons.
    pub sample_timesteps: usize,
    /// Keep every n-th replan point when probing rollout records.
    pub stride: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            k: 999,
            beta_start: 1e-5,
            beta_end: 5e-3,
            sample_timesteps: 200,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub sft0: SftTrainSection,
    pub dpo1: DpoTrainSection,
    pub distill2: DistillTrainSection,
    pub co_sft: CoSftTrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftTrainSection {
    pub steps: u64,
    pub learning_rate: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: u64,
}

impl Default for SftTrainSection {
    fn default() -> Self {
        SftTrainSection {
            steps: 600,
            learning_rate: 1e-3,
            batch: 16,
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoTrainSection {
    pub steps: u64,
    pub learning_rate: f64,
    pub batch: usize,
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: u64,
}

impl Default for DpoTrainSection {
    fn default() -> Self {
        DpoTrainSection {
            steps: 200,
            learning_rate: 1e-4,
            batch: 16,
            alpha: 0.1,
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillTrainSection {
    pub steps: u64,
    pub learning_rate: f64,
    pub batch: usize,
    pub gamma: f64,
    pub sim_kind: SimKind,
    pub student_head: HeadKind,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: u64,
}

impl Default for DistillTrainSection {
    fn default() -> Self {
        DistillTrainSection {
            steps: 400,
            learning_rate: 5e-4,
            batch: 16,
            gamma: 0.1,
            sim_kind: SimKind::NegCosine,
            student_head: HeadKind::Discrete,
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 500,
        }
    }
}

/// Co-SFT gets a larger step budget than stage 0; the default preserves the
/// 5:3 ratio between the mixture run and the plain SFT run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoSftTrainSection {
    pub steps: u64,
    pub learning_rate: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: u64,
}

impl Default for CoSftTrainSection {
    fn default() -> Self {
        let sft = SftTrainSection::default();
        CoSftTrainSection {
            steps: sft.steps * 5 / 3,
            learning_rate: sft.learning_rate,
            batch: sft.batch,
            optimizer: sft.optimizer,
            checkpoint_every: sft.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub model: ModelSection,
    pub data: DataGenConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection { seed: 0 },
            env: EnvConfig::default(),
            model: ModelSection::default(),
            data: DataGenConfig::default(),
            train: TrainSection {
                sft0: SftTrainSection::default(),
                dpo1: DpoTrainSection::default(),
                distill2: DistillTrainSection::default(),
                co_sft: CoSftTrainSection::default(),
            },
            eval: EvalSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config serialize error: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Apply one `dotted.key=value` override onto the TOML tree, then
    /// re-validate the whole config.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut tree: toml::Value = toml::Value::try_from(self)
            .map_err(|e| Error::config(format!("config to tree: {e}")))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, sections) = parts
            .split_last()
            .ok_or_else(|| Error::config("empty override key"))?;
        let mut node = &mut tree;
        for part in sections {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| Error::config(format!("unknown config section {part} in {key}")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key {key} does not name a table entry")))?;
        let existing = table
            .get(*last)
            .ok_or_else(|| Error::config(format!("unknown config key {key}")))?;
        let parsed: toml::Value = match existing {
            toml::Value::Integer(_) => toml::Value::Integer(
                value.parse().map_err(|_| Error::config(format!("{key} expects an integer")))?,
            ),
            toml::Value::Float(_) => toml::Value::Float(
                value.parse().map_err(|_| Error::config(format!("{key} expects a float")))?,
            ),
            toml::Value::Boolean(_) => toml::Value::Boolean(
                value.parse().map_err(|_| Error::config(format!("{key} expects a bool")))?,
            ),
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            other => {
                return Err(Error::config(format!(
                    "override key {key} targets unsupported type {}",
                    other.type_str()
                )))
            }
        };
        table.insert(last.to_string(), parsed);
        let text = toml::to_string(&tree).map_err(|e| Error::config(format!("{e}")))?;
        Self::from_toml_str(&text)
    }

    /// The policy model configuration implied by this run.
    pub fn model_config(&self, head: HeadKind) -> ModelConfig {
        ModelConfig {
            d_action: self.model.d_action,
            horizon: self.model.horizon,
            vocab: self.model.vocab,
            width: self.model.width,
            blocks: self.model.blocks,
            heads: self.model.heads,
            mlp_hidden: self.model.mlp_hidden,
            img_h: self.env.img,
            img_w: self.env.img,
            channels: self.env.channels,
            patch: self.model.patch,
            prompt_len: crate::datagen::PROMPT_LEN,
            prompt_vocab: crate::datagen::PROMPT_VOCAB,
            head,
        }
    }

    pub fn sft0_config(&self) -> SftConfig {
        SftConfig {
            steps: self.train.sft0.steps,
            learning_rate: self.train.sft0.learning_rate,
            batch: self.train.sft0.batch,
            optimizer: self.train.sft0.optimizer,
            checkpoint_every: self.train.sft0.checkpoint_every,
        }
    }

    pub fn co_sft_config(&self) -> SftConfig {
        SftConfig {
            steps: self.train.co_sft.steps,
            learning_rate: self.train.co_sft.learning_rate,
            batch: self.train.co_sft.batch,
            optimizer: self.train.co_sft.optimizer,
            checkpoint_every: self.train.co_sft.checkpoint_every,
        }
    }

    pub fn dpo1_config(&self) -> DpoConfig {
        DpoConfig {
            alpha: self.train.dpo1.alpha,
            learning_rate: self.train.dpo1.learning_rate,
            batch: self.train.dpo1.batch,
            steps: self.train.dpo1.steps,
            optimizer: self.train.dpo1.optimizer,
            checkpoint_every: self.train.dpo1.checkpoint_every,
        }
    }

    pub fn distill2_config(&self) -> DistillConfig {
        DistillConfig {
            gamma: self.train.distill2.gamma,
            sim_kind: self.train.distill2.sim_kind,
            student_head: self.train.distill2.student_head,
            learning_rate: self.train.distill2.learning_rate,
            batch: self.train.distill2.batch,
            steps: self.train.distill2.steps,
            optimizer: self.train.distill2.optimizer,
            checkpoint_every: self.train.distill2.checkpoint_every,
        }
    }

    /// DPO-then-SFT is stage 2 with the distillation weight forced to zero.
    pub fn dpo_then_sft_config(&self) -> DistillConfig {
        DistillConfig {
            gamma: 0.0,
            ..self.distill2_config()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.data.validate()?;
        if self.model.d_action != 3 {
            return Err(Error::config("the simulator is 3-DoF: model.d_action must be 3"));
        }
        self.model_config(HeadKind::Discrete).validate()?;
        self.model_config(HeadKind::Continuous).validate()?;
        if self.model.horizon > 16 {
            return Err(Error::config("horizon above 16 exceeds the prompt vocabulary"));
        }
        self.sft0_config().validate()?;
        self.co_sft_config().validate()?;
        self.dpo1_config().validate()?;
        self.distill2_config().validate()?;
        if self.eval.h_exec == 0 || self.eval.h_exec > self.model.horizon {
            return Err(Error::config("eval.h_exec must be in 1..=horizon"));
        }
        if self.eval.episodes_per_task == 0 || self.eval.chain_len == 0 {
            return Err(Error::config("eval episode counts must be positive"));
        }
        if self.probe.k < 2 {
            return Err(Error::config("probe.k must be at least 2"));
        }
        if !(self.probe.beta_start > 0.0 && self.probe.beta_start < self.probe.beta_end && self.probe.beta_end < 1.0) {
            return Err(Error::config("probe betas must satisfy 0 < start < end < 1"));
        }
        if self.probe.sample_timesteps == 0 || self.probe.stride == 0 {
            return Err(Error::config("probe.sample_timesteps and stride must be positive"));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> Result<String> {
        Ok(crate::io::sha256_hex(self.to_toml_string()?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Byte-identical canonical serialization.
        assert_eq!(text, back.to_toml_string().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml_string().unwrap();
        text.push_str("\n[surprise]\nkey = 1\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text2 = text.replace("[surprise]\nkey = 1", "");
        let mut with_field = text2.clone();
        with_field = with_field.replace("[run]", "[run]\nbogus = 3");
        assert!(RunConfig::from_toml_str(&with_field).is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = RunConfig::default();
        let cfg2 = cfg.with_override("run.seed", "42").unwrap();
        assert_eq!(cfg2.run.seed, 42);
        let cfg3 = cfg.with_override("train.distill2.gamma", "0.5").unwrap();
        assert_eq!(cfg3.train.distill2.gamma, 0.5);
        let cfg4 = cfg.with_override("train.distill2.sim_kind", "l2").unwrap();
        assert_eq!(cfg4.train.distill2.sim_kind, SimKind::L2);
        assert!(cfg.with_override("no.such.key", "1").is_err());
        // Violating a validation rule is caught.
        assert!(cfg.with_override("eval.h_exec", "99").is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.with_override("run.seed", "1").unwrap();
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_eq!(a.config_hash().unwrap(), RunConfig::default().config_hash().unwrap());
    }

    #[test]
    fn dpo_then_sft_is_distill_with_zero_gamma() {
        let cfg = RunConfig::default();
        let d = cfg.dpo_then_sft_config();
        assert_eq!(d.gamma, 0.0);
        assert_eq!(d.steps, cfg.train.distill2.steps);
    }
}
