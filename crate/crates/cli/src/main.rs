//! vcl: pipeline driver for the visual-conditioning laboratory.
//!
//! Exit codes: 0 success, 2 validation error, 3 missing lineage, 4
//! numerical failure.

mod commands;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vcl_core::error::Error;

use commands::{eval_cmd, gen_data, probe_vc, report, train};

#[derive(Parser)]
#[command(name = "vcl", version, about = "Track-aligned policy training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the paired dataset and trajectory files into a new run dir.
    GenData {
        /// Run configuration TOML.
        #[arg(short, long)]
        config: PathBuf,
        /// Run directory to create (VCL_DATA_ROOT joins relative paths).
        #[arg(short, long)]
        run_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override individual config keys, e.g. --set train.sft0.steps=100.
        #[arg(long = "set", value_parser = parse_kv)]
        sets: Vec<(String, String)>,
        /// Also export trajectory metadata as JSON for inspection.
        #[arg(long)]
        export_json: bool,
    },
    /// Train one stage; resumes automatically from a persisted state file.
    Train {
        #[arg(short, long)]
        run_dir: PathBuf,
        #[arg(short, long, value_enum)]
        stage: train::Stage,
        /// Pause (without finalizing) once this absolute step is reached.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Emit visual-conditioning profile and summary CSVs.
    ProbeVc {
        #[arg(short, long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "dataset")]
        source: probe_vc::ProbeSource,
        /// Checkpoint tags to probe with --source dataset.
        #[arg(long, value_delimiter = ',', default_value = "stage0,stage1,stage2")]
        stages: Vec<String>,
        /// Snapshot file under the run dir, for --source records.
        #[arg(long)]
        records: Option<String>,
        /// Checkpoint tag to probe with --source records.
        #[arg(long, default_value = "stage0")]
        checkpoint: String,
        /// Output label: probe/{profiles,summary}_<label>.csv.
        #[arg(long, default_value = "vc")]
        label: String,
        /// Exit non-zero when a requested cohort is empty.
        #[arg(long)]
        fail_on_empty_cohort: bool,
    },
    /// Evaluate a checkpoint: per-task success rates or 5-task chains.
    Eval {
        #[arg(short, long)]
        run_dir: PathBuf,
        #[arg(short, long)]
        checkpoint: String,
        #[arg(short, long, value_enum, default_value = "suite")]
        mode: eval_cmd::EvalMode,
        /// Override the execute horizon.
        #[arg(long)]
        h_exec: Option<usize>,
        /// Also evaluate the open-loop h_exec = H variant.
        #[arg(long)]
        both_horizons: bool,
    },
    /// Compare two or more runs: VC/SR table, verdicts, plot data.
    Report {
        /// Manifest paths (at least two).
        #[arg(short, long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got '{s}'"))
}

/// Resolve a run dir against VCL_DATA_ROOT when it is relative.
fn resolve_run_dir(p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        return p;
    }
    match std::env::var_os("VCL_DATA_ROOT") {
        Some(root) => PathBuf::from(root).join(p),
        None => p,
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::MissingLineage(_) => 3,
        Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, run_dir, seed, sets, export_json } => {
            gen_data::run(&config, &resolve_run_dir(run_dir), seed, &sets, export_json)
        }
        Command::Train { run_dir, stage, stop_after } => {
            train::run(&resolve_run_dir(run_dir), stage, stop_after)
        }
        Command::ProbeVc { run_dir, source, stages, records, checkpoint, label, fail_on_empty_cohort } => {
            probe_vc::run(
                &resolve_run_dir(run_dir),
                source,
                &stages,
                records.as_deref(),
                &checkpoint,
                &label,
                fail_on_empty_cohort,
            )
        }
        Command::Eval { run_dir, checkpoint, mode, h_exec, both_horizons } => {
            eval_cmd::run(&resolve_run_dir(run_dir), &checkpoint, mode, h_exec, both_horizons)
        }
        Command::Report { manifests, out } => report::run(&manifests, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
