//! `vcl probe-vc`: visual-conditioning profiles and summaries.
//!
//! Two sources: `dataset` probes checkpoints on sampled dataset timesteps
//! (stage1 sees track-annotated inputs, every other tag plain inputs);
//! `records` probes a checkpoint on saved rollout snapshots and summarizes
//! per success/failure cohort.

use std::io::Write;
use std::path::Path;

use clap::ValueEnum;
use vcl_core::config::RunConfig;
use vcl_core::error::{Error, Result};
use vcl_core::evalharness::{load_rollout_records, probe_inputs_from_records};
use vcl_core::io::{load_checkpoint, load_dataset};
use vcl_core::policy::PolicyModel;
use vcl_core::probe::{
    batch_profiles, cohort_summary, profiles_to_csv, sample_probe_points, stage_profiles,
    summary_to_csv, Cohort, DiffusionSchedule, ProbeInput, StageInput, PROFILE_CSV_HEADER,
    SUMMARY_CSV_HEADER,
};

use crate::run_dir::RunDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeSource {
    Dataset,
    Records,
}

fn schedule_of(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    DiffusionSchedule::linear(cfg.probe.k, cfg.probe.beta_start, cfg.probe.beta_end)
}

fn load_stage_model(rd: &RunDir, cfg: &RunConfig, tag: &str) -> Result<PolicyModel> {
    let path = rd.checkpoint_path(tag);
    if !path.exists() {
        return Err(Error::MissingLineage(format!("missing checkpoint for stage {tag}")));
    }
    let ck = load_checkpoint(&path)?;
    let expect = cfg.model_config(ck.model.cfg.head);
    if ck.model.cfg != expect {
        return Err(Error::format(format!("checkpoint {tag} does not match the run dimensions")));
    }
    Ok(ck.model)
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    run_root: &Path,
    source: ProbeSource,
    stages: &[String],
    records: Option<&str>,
    checkpoint: &str,
    label: &str,
    fail_on_empty_cohort: bool,
) -> Result<()> {
    let rd = RunDir::open(run_root)?;
    let cfg = rd.config()?;
    let schedule = schedule_of(&cfg)?;
    let mut profiles_csv = String::from(PROFILE_CSV_HEADER);
    profiles_csv.push('\n');
    let mut summary_csv = String::from(SUMMARY_CSV_HEADER);
    summary_csv.push('\n');

    match source {
        ProbeSource::Dataset => {
            let ds = load_dataset(&rd.dataset_path())?;
            let points = sample_probe_points(&ds, cfg.probe.sample_timesteps, cfg.run.seed);
            if points.is_empty() {
                return Err(Error::config("no paired samples available to probe"));
            }
            for tag in stages {
                let model = load_stage_model(&rd, &cfg, tag)?;
                let input = if tag == "stage1" { StageInput::Annotated } else { StageInput::Plain };
                let profiles = stage_profiles(&model, input, &points, &schedule, cfg.run.seed)?;
                let summary = cohort_summary(&profiles, Cohort::All)?;
                profiles_csv.push_str(&profiles_to_csv(tag, Cohort::All, &profiles));
                summary_csv.push_str(&summary_to_csv(tag, &summary));
                println!(
                    "{tag} ({:?} inputs): mean VC {:.5} nats over {} points",
                    input,
                    summary.grand_mean(),
                    summary.count
                );
            }
        }
        ProbeSource::Records => {
            let rel = records.ok_or_else(|| {
                Error::config("--records <path under run dir> is required with --source records")
            })?;
            let model = load_stage_model(&rd, &cfg, checkpoint)?;
            let recs = load_rollout_records(&rd.root.join(rel))?;
            let inputs: Vec<ProbeInput> =
                probe_inputs_from_records(&recs, &cfg.env, cfg.model.horizon, cfg.probe.stride)?;
            if inputs.is_empty() {
                return Err(Error::config("no replan points found in the records"));
            }
            let profiles = batch_profiles(&model, &inputs, &schedule, cfg.run.seed)?;
            for cohort in [Cohort::Success, Cohort::Failure, Cohort::All] {
                match cohort_summary(&profiles, cohort) {
                    Ok(summary) => {
                        summary_csv.push_str(&summary_to_csv(checkpoint, &summary));
                        println!(
                            "{checkpoint} cohort {}: mean VC {:.5} nats over {} profiles",
                            cohort.label(),
                            summary.grand_mean(),
                            summary.count
                        );
                    }
                    Err(_) => {
                        eprintln!("warning: cohort {} is empty", cohort.label());
                        if fail_on_empty_cohort {
                            return Err(Error::config(format!("cohort {} is empty", cohort.label())));
                        }
                    }
                }
            }
            // Profiles carry their cohort via the success flag; export all.
            profiles_csv.push_str(&profiles_to_csv(checkpoint, Cohort::All, &profiles));
        }
    }

    let profiles_path = rd.root.join(format!("probe/profiles_{label}.csv"));
    let summary_path = rd.root.join(format!("probe/summary_{label}.csv"));
    let mut f = std::fs::File::create(&profiles_path)?;
    f.write_all(profiles_csv.as_bytes())?;
    let mut f = std::fs::File::create(&summary_path)?;
    f.write_all(summary_csv.as_bytes())?;
    rd.record_artifact(&format!("probe_profiles_{label}"), &profiles_path)?;
    rd.record_artifact(&format!("probe_summary_{label}"), &summary_path)?;
    println!("wrote {} and {}", profiles_path.display(), summary_path.display());
    Ok(())
}
