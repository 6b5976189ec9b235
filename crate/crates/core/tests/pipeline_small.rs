//! Small end-to-end pipeline runs at library level: stage chaining,
//! teacher/reference freezing, determinism, and kill-resume equivalence.

use vcl_core::datagen::{build_dataset, DataGenConfig, Dataset};
use vcl_core::distill::{train_stage0, train_stage2, DistillConfig, SimKind};
use vcl_core::policy::{HeadKind, ModelConfig, PolicyModel};
use vcl_core::prefopt::{holdout_pairs, reward_pair_accuracy, train_stage1, DpoConfig};
use vcl_core::simenv::EnvConfig;
use vcl_core::trainer::{OptimizerKind, TrainIo};

fn tiny_dataset(seed: u64) -> Dataset {
    let mut env = EnvConfig::default();
    env.n_tasks = 2;
    let gen = DataGenConfig { demos_per_task: 5, ..DataGenConfig::default() };
    build_dataset(&env, &gen, 4, 9, seed).unwrap()
}

fn tiny_model_cfg(ds: &Dataset) -> ModelConfig {
    ModelConfig {
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
        prompt_len: vcl_core::datagen::PROMPT_LEN,
        prompt_vocab: vcl_core::datagen::PROMPT_VOCAB,
        head: HeadKind::Discrete,
    }
}

#[test]
fn three_stage_chain_runs_and_freezes_parents() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(5);
    let mcfg = tiny_model_cfg(&ds);
    let sft = vcl_core::distill::SftConfig {
        steps: 12,
        learning_rate: 1e-3,
        batch: 8,
        optimizer: OptimizerKind::Adam,
        checkpoint_every: 100,
    };
    let m0 = dir.path().join("sft0.jsonl");
    let stage0 = train_stage0(&mcfg, &ds, &sft, 7, TrainIo::new(&m0, None)).unwrap();
    assert!(stage0.completed);
    let stage0 = stage0.model;
    assert_eq!(std::fs::read_to_string(&m0).unwrap().lines().count(), 12);

    let dcfg = DpoConfig {
        alpha: 0.1,
        learning_rate: 1e-3,
        batch: 8,
        steps: 6,
        optimizer: OptimizerKind::Adam,
        checkpoint_every: 100,
    };
    let m1 = dir.path().join("dpo1.jsonl");
    let stage0_before = stage0.params.clone();
    let stage1 = train_stage1(&stage0, &ds, &dcfg, 7, TrainIo::new(&m1, None)).unwrap().model;
    // The reference (stage-0 weights) is untouched by stage 1.
    assert_eq!(stage0.params, stage0_before);
    assert_ne!(stage1.params, stage0.params);

    let cfg2 = DistillConfig {
        gamma: 0.1,
        sim_kind: SimKind::NegCosine,
        student_head: HeadKind::Discrete,
        learning_rate: 1e-3,
        batch: 8,
        steps: 6,
        optimizer: OptimizerKind::Adam,
        checkpoint_every: 100,
    };
    let m2 = dir.path().join("distill2.jsonl");
    let teacher_before = stage1.params.clone();
    let stage2 = train_stage2(&stage1, &ds, &cfg2, 7, TrainIo::new(&m2, None)).unwrap().model;
    assert_eq!(stage1.params, teacher_before, "teacher must stay frozen");
    assert_ne!(stage2.params, stage1.params);

    // Implicit-reward plumbing is evaluable on held-out pairs.
    let pairs = holdout_pairs(&ds, 3).unwrap();
    let acc = reward_pair_accuracy(&stage1, &stage0, &ds, &pairs, 0.1).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn training_is_seed_deterministic() {
    let ds = tiny_dataset(6);
    let mcfg = tiny_model_cfg(&ds);
    let sft = vcl_core::distill::SftConfig {
        steps: 8,
        learning_rate: 1e-3,
        batch: 8,
        optimizer: OptimizerKind::Adam,
        checkpoint_every: 100,
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = train_stage0(&mcfg, &ds, &sft, 11, TrainIo::new(&d1.path().join("m.jsonl"), None))
        .unwrap()
        .model;
    let b = train_stage0(&mcfg, &ds, &sft, 11, TrainIo::new(&d2.path().join("m.jsonl"), None))
        .unwrap()
        .model;
    assert_eq!(a.params, b.params);
    assert_eq!(
        std::fs::read_to_string(d1.path().join("m.jsonl")).unwrap(),
        std::fs::read_to_string(d2.path().join("m.jsonl")).unwrap()
    );
    let c = train_stage0(&mcfg, &ds, &sft, 12, TrainIo::new(&d1.path().join("c.jsonl"), None))
        .unwrap()
        .model;
    assert_ne!(a.params, c.params);
}

#[test]
fn kill_resume_reproduces_the_uninterrupted_trajectory() {
    let ds = tiny_dataset(7);
    let mcfg = tiny_model_cfg(&ds);
    let sft = vcl_core::distill::SftConfig {
        steps: 20,
        learning_rate: 1e-3,
        batch: 8,
        optimizer: OptimizerKind::Adam,
        checkpoint_every: 5,
    };

    // Uninterrupted reference run.
    let ref_dir = tempfile::tempdir().unwrap();
    let ref_metrics = ref_dir.path().join("m.jsonl");
    let reference = train_stage0(&mcfg, &ds, &sft, 21, TrainIo::new(&ref_metrics, None))
        .unwrap()
        .model;

    // Interrupted run: pause at step 13 (one past the last persisted state
    // at 10 would also work; pause persists exactly at 13), then resume.
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.jsonl");
    let state = dir.path().join("state.bin");
    let paused = train_stage0(
        &mcfg,
        &ds,
        &sft,
        21,
        TrainIo { metrics_path: &metrics, state_path: Some(&state), stop_after: Some(13) },
    )
    .unwrap();
    assert!(!paused.completed);
    assert!(state.exists());
    let resumed = train_stage0(
        &mcfg,
        &ds,
        &sft,
        21,
        TrainIo { metrics_path: &metrics, state_path: Some(&state), stop_after: None },
    )
    .unwrap();
    assert!(resumed.completed);
    assert!(!state.exists(), "state file removed after completion");
    assert_eq!(resumed.model.params, reference.params);
    assert_eq!(
        std::fs::read_to_string(&metrics).unwrap(),
        std::fs::read_to_string(&ref_metrics).unwrap()
    );
}

#[test]
fn dpo_then_sft_trace_equals_stage2_with_zero_gamma() {
    let ds = tiny_dataset(8);
    let mcfg = tiny_model_cfg(&ds);
    let teacher = PolicyModel::init(mcfg, 31).unwrap();
    let mk = |gamma: f64| DistillConfig {
        gamma,
        sim_kind: SimKind::NegCosine,
        student_head: HeadKind::Discrete,
        learning_rate: 1e-3,
        batch: 8,
        steps: 6,
        optimizer: OptimizerKind::Sgd,
        checkpoint_every: 100,
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = d1.path().join("a.jsonl");
    let m2 = d2.path().join("b.jsonl");
    let a = train_stage2(&teacher, &ds, &mk(0.0), 5, TrainIo::new(&m1, None)).unwrap().model;
    let b = train_stage2(&teacher, &ds, &mk(0.0), 5, TrainIo::new(&m2, None)).unwrap().model;
    assert_eq!(a.params, b.params);
    assert_eq!(
        std::fs::read_to_string(&m1).unwrap(),
        std::fs::read_to_string(&m2).unwrap()
    );
    // The zero-gamma trace reports no distillation term.
    for line in std::fs::read_to_string(&m1).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["distill"].is_null());
        assert_eq!(v["total"], v["sft"]);
    }
}
