//! `vcl eval`: suite success rates and sequential task chains.

use std::path::Path;

use clap::ValueEnum;
use serde::Serialize;
use vcl_core::error::Result;
use vcl_core::evalharness::{
    evaluate_chains, evaluate_suite, save_rollout_records, ChainSummary, PolicyController,
    RhcConfig, SuiteResult,
};
use vcl_core::io::load_checkpoint;

use crate::run_dir::RunDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Suite,
    Chains,
}

#[derive(Serialize)]
struct SuiteOutput<'a> {
    checkpoint: &'a str,
    head: String,
    seed: u64,
    rhc: RhcConfig,
    max_steps: usize,
    suite: &'a SuiteResult,
}

#[derive(Serialize)]
struct ChainOutput<'a> {
    checkpoint: &'a str,
    head: String,
    seed: u64,
    rhc: RhcConfig,
    max_steps_per_task: usize,
    chains: &'a ChainSummary,
}

pub fn run(
    run_root: &Path,
    checkpoint_tag: &str,
    mode: EvalMode,
    h_exec_override: Option<usize>,
    both_horizons: bool,
) -> Result<()> {
    let rd = RunDir::open(run_root)?;
    let cfg = rd.config()?;
    let path = rd.require_checkpoint(checkpoint_tag)?;
    let ck = load_checkpoint(&path)?;
    // The checkpoint decides its own head; dimensions must match the run.
    let expect = cfg.model_config(ck.model.cfg.head);
    if ck.model.cfg != expect {
        return Err(vcl_core::error::Error::format(format!(
            "checkpoint {checkpoint_tag} does not match the run's model dimensions"
        )));
    }
    let ctrl = PolicyController { model: &ck.model };
    let mut h_execs = vec![h_exec_override.unwrap_or(cfg.eval.h_exec)];
    if both_horizons && !h_execs.contains(&cfg.model.horizon) {
        h_execs.push(cfg.model.horizon);
    }

    for h_exec in h_execs {
        let rhc = RhcConfig { horizon: cfg.model.horizon, h_exec };
        rhc.validate()?;
        match mode {
            EvalMode::Suite => {
                let (suite, records) = evaluate_suite(
                    &ctrl,
                    &cfg.env,
                    rhc,
                    cfg.eval.episodes_per_task,
                    cfg.eval.max_steps,
                    cfg.run.seed,
                )?;
                let base = format!("{checkpoint_tag}_h{h_exec}");
                let out = rd.root.join(format!("eval/suite_{base}.json"));
                std::fs::write(
                    &out,
                    serde_json::to_string_pretty(&SuiteOutput {
                        checkpoint: checkpoint_tag,
                        head: format!("{:?}", ck.model.cfg.head),
                        seed: cfg.run.seed,
                        rhc,
                        max_steps: cfg.eval.max_steps,
                        suite: &suite,
                    })?,
                )?;
                let jsonl = rd.root.join(format!("eval/records_{base}.jsonl"));
                let snaps = rd.root.join(format!("eval/snapshots_{base}.bin"));
                save_rollout_records(&jsonl, &snaps, &records)?;
                rd.record_artifact(&format!("eval_suite_{base}"), &out)?;
                rd.record_artifact(&format!("eval_records_{base}"), &jsonl)?;
                rd.record_artifact(&format!("eval_snapshots_{base}"), &snaps)?;
                println!("suite {checkpoint_tag} (8-{h_exec}): mean SR {:.3}", suite.mean_sr);
                for t in &suite.per_task {
                    println!("  task {}: SR {:.3}", t.task_id, t.success_rate);
                }
            }
            EvalMode::Chains => {
                let chains = evaluate_chains(
                    &ctrl,
                    &cfg.env,
                    rhc,
                    cfg.eval.n_chains,
                    cfg.eval.chain_len,
                    cfg.eval.max_steps,
                    cfg.run.seed,
                )?;
                let base = format!("{checkpoint_tag}_h{h_exec}");
                let out = rd.root.join(format!("eval/chains_{base}.json"));
                std::fs::write(
                    &out,
                    serde_json::to_string_pretty(&ChainOutput {
                        checkpoint: checkpoint_tag,
                        head: format!("{:?}", ck.model.cfg.head),
                        seed: cfg.run.seed,
                        rhc,
                        max_steps_per_task: cfg.eval.max_steps,
                        chains: &chains,
                    })?,
                )?;
                rd.record_artifact(&format!("eval_chains_{base}"), &out)?;
                let cols: Vec<String> = chains
                    .per_position
                    .iter()
                    .map(|p| format!("{:.1}%", 100.0 * p))
                    .collect();
                println!(
                    "chains {checkpoint_tag} (8-{h_exec}): {} | avg len {:.2}",
                    cols.join(" "),
                    chains.avg_len
                );
            }
        }
    }
    Ok(())
}
