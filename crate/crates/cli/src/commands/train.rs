//! `vcl train`: stage pipelines with enforced lineage.

use std::path::Path;
use std::time::Instant;

use clap::ValueEnum;
use serde::Serialize;
use vcl_core::distill::{train_co_sft, train_stage0, train_stage2};
use vcl_core::error::Result;
use vcl_core::io::{load_checkpoint_expecting, load_dataset, save_checkpoint, sha256_file, Lineage};
use vcl_core::policy::HeadKind;
use vcl_core::prefopt::train_stage1;
use vcl_core::trainer::{TrainIo, TrainRun};

use crate::run_dir::RunDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Sft0,
    Dpo1,
    Distill2,
    DpoThenSft,
    CoSft,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Sft0 => "stage0",
            Stage::Dpo1 => "stage1",
            Stage::Distill2 => "stage2",
            Stage::DpoThenSft => "dpo_then_sft",
            Stage::CoSft => "co_sft",
        }
    }
}

#[derive(Serialize)]
struct TrainTiming {
    stage: String,
    wall_seconds: f64,
    completed: bool,
}

pub fn run(run_root: &Path, stage: Stage, stop_after: Option<u64>) -> Result<()> {
    let rd = RunDir::open(run_root)?;
    let cfg = rd.config()?;
    let dataset = load_dataset(&rd.dataset_path())?;
    let tag = stage.tag();
    let metrics_path = rd.metrics_path(tag);
    let state_path = rd.state_path(tag);
    let io = TrainIo {
        metrics_path: &metrics_path,
        state_path: Some(&state_path),
        stop_after,
    };
    let seed = cfg.run.seed;
    let started = Instant::now();

    let (run, lineage): (TrainRun, Lineage) = match stage {
        Stage::Sft0 => {
            let mcfg = cfg.model_config(HeadKind::Discrete);
            (train_stage0(&mcfg, &dataset, &cfg.sft0_config(), seed, io)?, Vec::new())
        }
        Stage::CoSft => {
            let mcfg = cfg.model_config(HeadKind::Discrete);
            (train_co_sft(&mcfg, &dataset, &cfg.co_sft_config(), seed, io)?, Vec::new())
        }
        Stage::Dpo1 => {
            let p = rd.require_checkpoint("stage0")?;
            let ck = load_checkpoint_expecting(&p, &cfg.model_config(HeadKind::Discrete))?;
            let mut lineage = ck.lineage.clone();
            lineage.push(("stage0".into(), sha256_file(&p)?));
            (train_stage1(&ck.model, &dataset, &cfg.dpo1_config(), seed, io)?, lineage)
        }
        Stage::Distill2 | Stage::DpoThenSft => {
            let p = rd.require_checkpoint("stage1")?;
            let ck = load_checkpoint_expecting(&p, &cfg.model_config(HeadKind::Discrete))?;
            let mut lineage = ck.lineage.clone();
            lineage.push(("stage1".into(), sha256_file(&p)?));
            let dcfg = if stage == Stage::Distill2 {
                cfg.distill2_config()
            } else {
                cfg.dpo_then_sft_config()
            };
            (train_stage2(&ck.model, &dataset, &dcfg, seed, io)?, lineage)
        }
    };

    let wall = started.elapsed().as_secs_f64();
    std::fs::write(
        rd.root.join(format!("metrics/{tag}.time.json")),
        serde_json::to_string_pretty(&TrainTiming {
            stage: tag.to_string(),
            wall_seconds: wall,
            completed: run.completed,
        })?,
    )?;

    if !run.completed {
        println!("{tag}: paused before completion; state persisted at {}", state_path.display());
        println!("rerun `vcl train` with the same arguments to resume");
        return Ok(());
    }
    let ckpt = rd.checkpoint_path(tag);
    save_checkpoint(&ckpt, &run.model, tag, &lineage)?;
    rd.record_artifact(&format!("checkpoint_{tag}"), &ckpt)?;
    rd.record_artifact(&format!("metrics_{tag}"), &metrics_path)?;
    println!("{tag}: trained in {wall:.1}s, checkpoint at {}", ckpt.display());
    Ok(())
}
