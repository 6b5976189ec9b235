//! Toy vision-language-action policy.
//!
//! A multimodal backbone encodes an image and an instruction token sequence
//! into one latent per action token slot (`M = D * H` slots total), and an
//! interchangeable action expert maps latents to actions: either a discrete
//! autoregressive token head (causal attention) or a continuous regression
//! head decoding all slots in parallel (full attention). Gradients are
//! hand-written and checked against finite differences.

pub mod backward;
pub mod forward;
pub mod math;
pub mod tokenizer;

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Which action expert the model carries. The attention mask follows the
/// head: discrete decodes autoregressively under a causal mask, continuous
/// decodes all slots in parallel with full attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Action dimensionality D.
    pub d_action: usize,
    /// Chunk length H.
    pub horizon: usize,
    /// Action token vocabulary size V.
    pub vocab: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub prompt_len: usize,
    pub prompt_vocab: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    /// Number of action token slots.
    pub fn m_tokens(&self) -> usize {
        self.d_action * self.horizon
    }
    pub fn n_img_tokens(&self) -> usize {
        (self.img_h / self.patch) * (self.img_w / self.patch)
    }
    pub fn n_ctx(&self) -> usize {
        self.n_img_tokens() + self.prompt_len
    }
    pub fn seq_len(&self) -> usize {
        self.n_ctx() + self.m_tokens()
    }
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
    pub fn causal(&self) -> bool {
        self.head == HeadKind::Discrete
    }
    /// Embedding row used to fill slots that carry no decoded token yet.
    pub fn start_token(&self) -> usize {
        self.vocab
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_action == 0 || self.horizon == 0 {
            return Err(Error::config("d_action and horizon must be positive"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab must be at least 2"));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if self.img_h % self.patch != 0 || self.img_w % self.patch != 0 {
            return Err(Error::config(format!(
                "patch ({}) must divide image dims ({}x{})",
                self.patch, self.img_h, self.img_w
            )));
        }
        if self.prompt_len == 0 || self.prompt_vocab == 0 {
            return Err(Error::config("prompt template must be non-empty"));
        }
        if self.blocks == 0 || self.mlp_hidden == 0 || self.channels == 0 {
            return Err(Error::config("blocks, mlp_hidden, channels must be positive"));
        }
        Ok(())
    }
}

/// Byte-offset ranges of every named tensor inside the flat parameter array.
/// The layout is a pure function of the config.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub prompt_emb: Range<usize>,
    pub act_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub blocks: Vec<BlockIndex>,
    /// Discrete head projection; empty ranges on continuous models.
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    /// Continuous 4-layer regression head as (weight, bias) pairs.
    pub cont: Vec<(Range<usize>, Range<usize>)>,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct BlockIndex {
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub fc1: Range<usize>,
    pub fc1_b: Range<usize>,
    pub fc2: Range<usize>,
    pub fc2_b: Range<usize>,
}

impl ParamIndex {
    pub fn new(cfg: &ModelConfig) -> Self {
        let w = cfg.width;
        let mut off = 0usize;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let patch_w = take(cfg.patch_dim() * w);
        let patch_b = take(w);
        let prompt_emb = take(cfg.prompt_vocab * w);
        let act_emb = take((cfg.vocab + 1) * w);
        let pos_emb = take(cfg.seq_len() * w);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(BlockIndex {
                wq: take(w * w),
                wk: take(w * w),
                wv: take(w * w),
                wo: take(w * w),
                fc1: take(w * cfg.mlp_hidden),
                fc1_b: take(cfg.mlp_hidden),
                fc2: take(cfg.mlp_hidden * w),
                fc2_b: take(w),
            });
        }
        let (out_w, out_b, cont) = match cfg.head {
            HeadKind::Discrete => (take(w * cfg.vocab), take(cfg.vocab), Vec::new()),
            HeadKind::Continuous => {
                let mut cont = Vec::with_capacity(4);
                for layer in 0..4 {
                    let out_dim = if layer == 3 { 1 } else { w };
                    cont.push((take(w * out_dim), take(out_dim)));
                }
                (0..0, 0..0, cont)
            }
        };
        ParamIndex {
            patch_w,
            patch_b,
            prompt_emb,
            act_emb,
            pos_emb,
            blocks,
            out_w,
            out_b,
            cont,
            total: off,
        }
    }

    /// Named tensor ranges, for diagnostics and targeted tests.
    pub fn named(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("patch_w".to_string(), self.patch_w.clone()),
            ("patch_b".to_string(), self.patch_b.clone()),
            ("prompt_emb".to_string(), self.prompt_emb.clone()),
            ("act_emb".to_string(), self.act_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.wq"), b.wq.clone()));
            out.push((format!("block{i}.wk"), b.wk.clone()));
            out.push((format!("block{i}.wv"), b.wv.clone()));
            out.push((format!("block{i}.wo"), b.wo.clone()));
            out.push((format!("block{i}.fc1"), b.fc1.clone()));
            out.push((format!("block{i}.fc1_b"), b.fc1_b.clone()));
            out.push((format!("block{i}.fc2"), b.fc2.clone()));
            out.push((format!("block{i}.fc2_b"), b.fc2_b.clone()));
        }
        if !self.out_w.is_empty() {
            out.push(("out_w".to_string(), self.out_w.clone()));
            out.push(("out_b".to_string(), self.out_b.clone()));
        }
        for (i, (w, b)) in self.cont.iter().enumerate() {
            out.push((format!("cont{i}.w"), w.clone()));
            out.push((format!("cont{i}.b"), b.clone()));
        }
        out
    }
}

/// The policy network: config plus one flat f64 parameter array.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub cfg: ModelConfig,
    pub params: Vec<f64>,
    pub index: ParamIndex,
}

impl PolicyModel {
    /// Random initialization. Mixer output projections and the continuous
    /// head's final layer start at zero so residual streams start clean.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let index = ParamIndex::new(&cfg);
        let mut params = vec![0.0; index.total];
        let mut rng = stream_rng(seed, "model-init");
        let mut gauss = |range: Range<usize>, std: f64, params: &mut Vec<f64>| {
            for p in &mut params[range] {
                let z: f64 = rng.sample(StandardNormal);
                *p = z * std;
            }
        };
        gauss(index.patch_w.clone(), 0.02, &mut params);
        gauss(index.prompt_emb.clone(), 0.02, &mut params);
        gauss(index.act_emb.clone(), 0.02, &mut params);
        gauss(index.pos_emb.clone(), 0.02, &mut params);
        // Residual-stream output projections get the depth-scaled init so a
        // fresh model already mixes its inputs.
        let resid = 0.02 / (2.0 * cfg.blocks as f64).sqrt();
        for b in &index.blocks {
            gauss(b.wq.clone(), 0.02, &mut params);
            gauss(b.wk.clone(), 0.02, &mut params);
            gauss(b.wv.clone(), 0.02, &mut params);
            gauss(b.wo.clone(), resid, &mut params);
            gauss(b.fc1.clone(), 0.02, &mut params);
            gauss(b.fc2.clone(), resid, &mut params);
        }
        if !index.out_w.is_empty() {
            gauss(index.out_w.clone(), 0.02, &mut params);
        }
        let he = (2.0 / cfg.width as f64).sqrt();
        for (i, (w, _)) in index.cont.iter().enumerate() {
            if i < 3 {
                gauss(w.clone(), he, &mut params);
            }
            // final layer stays zero
        }
        Ok(PolicyModel { cfg, params, index })
    }

    pub fn tensor(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    pub fn param_count(&self) -> usize {
        self.index.total
    }

    /// Copy every tensor of `src` whose name and shape match into `self`.
    /// Returns the copied tensor names. Used to seed a continuous student
    /// from a discrete teacher backbone.
    pub fn copy_matching_from(&mut self, src: &PolicyModel) -> Vec<String> {
        let mine = self.index.named();
        let theirs: std::collections::HashMap<String, Range<usize>> =
            src.index.named().into_iter().collect();
        let mut copied = Vec::new();
        for (name, range) in mine {
            if let Some(sr) = theirs.get(&name) {
                if sr.len() == range.len() {
                    let src_vals = src.params[sr.clone()].to_vec();
                    self.params[range].copy_from_slice(&src_vals);
                    copied.push(name);
                }
            }
        }
        copied
    }

    pub fn require_head(&self, head: HeadKind) -> Result<()> {
        if self.cfg.head != head {
            return Err(Error::config(format!(
                "operation requires a {head:?} head but the model has {:?}",
                self.cfg.head
            )));
        }
        Ok(())
    }
}

/// Per-parameter gradients, shape-congruent with [`PolicyModel::params`].
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub data: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(model: &PolicyModel) -> Self {
        GradientBundle {
            data: vec![0.0; model.params.len()],
        }
    }

    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        math::axpy(&mut self.data, scale, &other.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Distribution over the action vocabulary at one token position.
#[derive(Debug, Clone)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn is_normalized(&self, tol: f64) -> bool {
        let s: f64 = self.probs.iter().sum();
        (s - 1.0).abs() <= tol && self.probs.iter().all(|&p| p >= 0.0)
    }
}

/// The M backbone output latents.
#[derive(Debug, Clone)]
pub struct LatentSet {
    pub width: usize,
    /// Row-major `[m_tokens x width]`.
    pub data: Vec<f64>,
}

impl LatentSet {
    pub fn row(&self, tau: usize) -> &[f64] {
        &self.data[tau * self.width..(tau + 1) * self.width]
    }
    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(head: HeadKind) -> ModelConfig {
        ModelConfig {
            d_action: 2,
            horizon: 3,
            vocab: 5,
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
            head,
        }
    }

    #[test]
    fn layout_is_config_deterministic() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let a = ParamIndex::new(&cfg);
        let b = ParamIndex::new(&cfg);
        assert_eq!(a.total, b.total);
        assert_eq!(a.named().len(), b.named().len());
        let m = PolicyModel::init(cfg, 1).unwrap();
        assert_eq!(m.params.len(), a.total);
    }

    #[test]
    fn m_tokens_is_d_times_h() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        assert_eq!(cfg.m_tokens(), 6);
        assert_eq!(cfg.seq_len(), 4 + 4 + 6);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_cfg(HeadKind::Discrete);
        let a = PolicyModel::init(cfg.clone(), 42).unwrap();
        let b = PolicyModel::init(cfg, 42).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn continuous_student_copies_backbone_only() {
        let t = PolicyModel::init(tiny_cfg(HeadKind::Discrete), 3).unwrap();
        let mut s = PolicyModel::init(tiny_cfg(HeadKind::Continuous), 9).unwrap();
        let copied = s.copy_matching_from(&t);
        assert!(copied.iter().any(|n| n == "patch_w"));
        assert!(copied.iter().any(|n| n == "block1.fc2"));
        assert!(!copied.iter().any(|n| n.starts_with("out_")));
        assert!(!copied.iter().any(|n| n.starts_with("cont")));
        assert_eq!(s.tensor(&s.index.patch_w), t.tensor(&t.index.patch_w));
    }

    #[test]
    fn validation_rejects_bad_dims() {
        let mut cfg = tiny_cfg(HeadKind::Discrete);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(HeadKind::Discrete);
        cfg.patch = 5;
        assert!(cfg.validate().is_err());
    }
}
