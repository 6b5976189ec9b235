//! `vcl gen-data`: build the paired dataset and trajectory files.

use std::path::Path;

use vcl_core::config::RunConfig;
use vcl_core::datagen::build_dataset;
use vcl_core::error::Result;
use vcl_core::io::{export_trajectories_json, save_dataset, save_trajectories};

use crate::run_dir::RunDir;

pub fn run(
    config_path: &Path,
    run_root: &Path,
    seed: Option<u64>,
    sets: &[(String, String)],
    export_json: bool,
) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    for (k, v) in sets {
        cfg = cfg.with_override(k, v)?;
    }
    if let Some(seed) = seed {
        cfg = cfg.with_override("run.seed", &seed.to_string())?;
    }
    let rd = RunDir::create(run_root, &cfg)?;

    let ds = build_dataset(&cfg.env, &cfg.data, cfg.model.horizon, cfg.model.vocab, cfg.run.seed)?;
    save_dataset(&rd.dataset_path(), &ds)?;
    save_trajectories(
        &rd.trajectories_path(),
        &ds.trajectories,
        &cfg.env,
        cfg.model.d_action,
        cfg.model.horizon,
    )?;
    let stats_path = rd.root.join("data/stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&ds.stats)?)?;
    if export_json {
        let json_path = rd.root.join("data/trajectories.json");
        export_trajectories_json(&json_path, &ds.trajectories, &cfg.env)?;
        rd.record_artifact("trajectories_json", &json_path)?;
    }
    rd.record_artifact("config", &rd.config_path())?;
    rd.record_artifact("dataset", &rd.dataset_path())?;
    rd.record_artifact("trajectories", &rd.trajectories_path())?;
    rd.record_artifact("dataset_stats", &stats_path)?;

    let s = &ds.stats;
    println!(
        "dataset: {} trajectories, {} instruction samples, {} track-annotated",
        ds.trajectories.len(),
        ds.instr_samples.len(),
        ds.tracked_samples.len()
    );
    println!(
        "track filters: kept {} | static {} | inconsistent {} | abrupt {} (total {})",
        s.tracks_kept,
        s.tracks_static,
        s.tracks_inconsistent,
        s.tracks_abrupt,
        s.tracks_total()
    );
    println!(
        "samples skipped for lack of tracks: {}/{} ({:.1}%), tokenizer clamps: {}",
        s.samples_skipped_no_tracks,
        s.samples_total,
        100.0 * s.samples_skipped_no_tracks as f64 / s.samples_total.max(1) as f64,
        s.tokenizer_clamped
    );
    Ok(())
}
