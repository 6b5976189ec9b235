//! `vcl report`: cross-run comparison of training recipes.
//!
//! Reads two or more run manifests (runs must share env and model dims),
//! aggregates per-variant visual conditioning and suite success rate over
//! the runs, and emits a comparison table, ordering verdicts, and paired
//! plot data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vcl_core::config::RunConfig;
use vcl_core::error::{Error, Result};
use vcl_core::io::ExperimentManifest;

/// Recipe variants in report order: the full pipeline, the two ablations,
/// and the SFT-only baseline.
pub const VARIANTS: [&str; 4] = ["stage2", "dpo_then_sft", "co_sft", "stage0"];

#[derive(Debug, Serialize)]
pub struct VariantRow {
    pub variant: String,
    pub mean_vc: f64,
    pub mean_sr: f64,
    pub runs: usize,
}

#[derive(Debug, Serialize)]
pub struct Verdict {
    pub claim: String,
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub rows: Vec<VariantRow>,
    pub verdicts: Vec<Verdict>,
    pub manifests: Vec<String>,
}

/// Mean VC per stage tag from a summary CSV (stage,cohort,position,mean,...).
fn parse_summary_csv(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingLineage(format!("{}: {e}", path.display())))?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 5 {
            return Err(Error::format(format!("bad summary row: {line}")));
        }
        if cols[1] != "all" {
            continue;
        }
        let mean: f64 = cols[3]
            .parse()
            .map_err(|_| Error::format(format!("bad mean in row: {line}")))?;
        let e = sums.entry(cols[0].to_string()).or_insert((0.0, 0));
        e.0 += mean;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

fn mean_sr_from_eval(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingLineage(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    v["suite"]["mean_sr"]
        .as_f64()
        .ok_or_else(|| Error::format(format!("{} has no suite.mean_sr", path.display())))
}

pub fn run(manifest_paths: &[PathBuf], out_dir: &Path) -> Result<()> {
    if manifest_paths.len() < 2 {
        return Err(Error::config("report needs at least 2 manifests"));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut base_dims: Option<(String, String)> = None;
    let mut per_variant: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for path in manifest_paths {
        let manifest = ExperimentManifest::load(path)?;
        let root = path
            .parent()
            .ok_or_else(|| Error::config(format!("{} has no parent dir", path.display())))?;
        manifest.verify(root)?;
        let cfg = RunConfig::load(&root.join("config.toml"))?;
        let dims = (
            serde_json::to_string(&cfg.env)?,
            serde_json::to_string(&cfg.model)?,
        );
        match &base_dims {
            None => base_dims = Some(dims),
            Some(base) => {
                if base != &dims {
                    return Err(Error::config(format!(
                        "manifest {} has mismatched env/model dimensions; refusing to compare",
                        path.display()
                    )));
                }
            }
        }
        let vc_by_stage = parse_summary_csv(&manifest.artifact_path(root, "probe_summary_final")?)?;
        for &variant in &VARIANTS {
            let vc = *vc_by_stage.get(variant).ok_or_else(|| {
                Error::MissingLineage(format!(
                    "{}: probe summary lacks stage {variant}",
                    path.display()
                ))
            })?;
            let sr_name = format!("eval_suite_{variant}_h{}", cfg.eval.h_exec);
            let sr = mean_sr_from_eval(&manifest.artifact_path(root, &sr_name)?)?;
            per_variant.entry(variant).or_default().push((vc, sr));
        }
    }

    let mut rows = Vec::new();
    for &variant in &VARIANTS {
        let vals = &per_variant[variant];
        rows.push(VariantRow {
            variant: variant.to_string(),
            mean_vc: vals.iter().map(|v| v.0).sum::<f64>() / vals.len() as f64,
            mean_sr: vals.iter().map(|v| v.1).sum::<f64>() / vals.len() as f64,
            runs: vals.len(),
        });
    }
    let get = |v: &str| rows.iter().find(|r| r.variant == v).expect("variant present");
    let verdicts = vec![
        Verdict {
            claim: "sr: stage2 >= stage0".into(),
            holds: get("stage2").mean_sr >= get("stage0").mean_sr,
            lhs: get("stage2").mean_sr,
            rhs: get("stage0").mean_sr,
        },
        Verdict {
            claim: "vc: stage2 >= dpo_then_sft".into(),
            holds: get("stage2").mean_vc >= get("dpo_then_sft").mean_vc,
            lhs: get("stage2").mean_vc,
            rhs: get("dpo_then_sft").mean_vc,
        },
        Verdict {
            claim: "vc: dpo_then_sft >= co_sft".into(),
            holds: get("dpo_then_sft").mean_vc >= get("co_sft").mean_vc,
            lhs: get("dpo_then_sft").mean_vc,
            rhs: get("co_sft").mean_vc,
        },
    ];

    let report = Report {
        rows,
        verdicts,
        manifests: manifest_paths.iter().map(|p| p.display().to_string()).collect(),
    };
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;

    // Paired-bars plot data: one row per variant with both metric values.
    let mut csv = String::from("variant,mean_vc,mean_sr\n");
    for r in &report.rows {
        csv.push_str(&format!("{},{:.12e},{:.12e}\n", r.variant, r.mean_vc, r.mean_sr));
    }
    std::fs::write(out_dir.join("plot_data.csv"), csv)?;

    println!("{:<14} {:>10} {:>8} {:>5}", "variant", "mean VC", "mean SR", "runs");
    for r in &report.rows {
        println!("{:<14} {:>10.5} {:>8.3} {:>5}", r.variant, r.mean_vc, r.mean_sr, r.runs);
    }
    for v in &report.verdicts {
        println!(
            "verdict: {} -> {} ({:.5} vs {:.5})",
            v.claim,
            if v.holds { "holds" } else { "FAILS" },
            v.lhs,
            v.rhs
        );
    }
    println!("wrote {}", out_dir.join("report.json").display());
    Ok(())
}
