//! Shared fixtures for the criterion benchmarks.

use vcl_core::datagen::{build_dataset, DataGenConfig, Dataset};
use vcl_core::policy::{HeadKind, ModelConfig, PolicyModel};
use vcl_core::simenv::EnvConfig;

/// The default-scale discrete model used across benchmarks.
pub fn bench_model(head: HeadKind) -> PolicyModel {
    let cfg = ModelConfig {
        d_action: 3,
        horizon: 8,
        vocab: 21,
        width: 64,
        blocks: 2,
        heads: 4,
        mlp_hidden: 256,
        img_h: 32,
        img_w: 32,
        channels: 3,
        patch: 8,
        prompt_len: vcl_core::datagen::PROMPT_LEN,
        prompt_vocab: vcl_core::datagen::PROMPT_VOCAB,
        head,
    };
    PolicyModel::init(cfg, 7).expect("valid bench config")
}

/// A small but non-trivial dataset fixture.
pub fn bench_dataset() -> Dataset {
    let mut env = EnvConfig::default();
    env.n_tasks = 4;
    let gen = DataGenConfig { demos_per_task: 3, ..DataGenConfig::default() };
    build_dataset(&env, &gen, 8, 21, 1).expect("bench dataset builds")
}
