//! Run-directory layout and manifest bookkeeping.
//!
//! One directory per run holds the persisted effective config, the manifest
//! with artifact hashes, and per-subsystem subdirectories. Stage tags are
//! the lineage vocabulary: stage0 -> stage1 -> stage2, plus the two
//! ablation recipes.

use std::path::{Path, PathBuf};

use vcl_core::config::RunConfig;
use vcl_core::error::{Error, Result};
use vcl_core::io::{sha256_file, ExperimentManifest};

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("config.toml").exists() {
            return Err(Error::MissingLineage(format!(
                "{} has no config.toml; run gen-data first",
                root.display()
            )));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        for sub in ["data", "checkpoints", "metrics", "state", "eval", "probe"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        cfg.save(&root.join("config.toml"))?;
        let manifest = ExperimentManifest::new(
            &format!("run-{}", &cfg.config_hash()?[..12]),
            &cfg.config_hash()?,
        );
        manifest.save(&root.join("manifest.json"))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config_path())
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn manifest(&self) -> Result<ExperimentManifest> {
        ExperimentManifest::load(&self.manifest_path())
    }

    /// Record an artifact under `name` and persist the manifest.
    pub fn record_artifact(&self, name: &str, file: &Path) -> Result<()> {
        let mut m = self.manifest()?;
        m.record(&self.root, name, file)?;
        m.save(&self.manifest_path())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join("data/dataset.bin")
    }

    pub fn trajectories_path(&self) -> PathBuf {
        self.root.join("data/trajectories.bin")
    }

    pub fn checkpoint_path(&self, tag: &str) -> PathBuf {
        self.root.join(format!("checkpoints/{tag}.ckpt"))
    }

    pub fn metrics_path(&self, tag: &str) -> PathBuf {
        self.root.join(format!("metrics/{tag}.jsonl"))
    }

    pub fn state_path(&self, tag: &str) -> PathBuf {
        self.root.join(format!("state/{tag}.state.bin"))
    }

    /// Verify a predecessor checkpoint exists and matches its manifest hash.
    pub fn require_checkpoint(&self, tag: &str) -> Result<PathBuf> {
        let path = self.checkpoint_path(tag);
        if !path.exists() {
            return Err(Error::MissingLineage(format!(
                "missing {tag} checkpoint at {}; train that stage first",
                path.display()
            )));
        }
        let manifest = self.manifest()?;
        if let Some(art) = manifest.artifacts.get(&format!("checkpoint_{tag}")) {
            let actual = sha256_file(&path)?;
            if actual != art.sha256 {
                return Err(Error::Format(format!(
                    "{tag} checkpoint does not hash-verify against the manifest"
                )));
            }
        }
        Ok(path)
    }
}
