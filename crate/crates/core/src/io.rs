//! Versioned file containers and artifact hashing.
//!
//! Every binary artifact starts with the magic `VCL1`, a format version, and
//! a kind code. Bulk numeric payloads are little-endian; small structured
//! headers ride along as JSON strings, which serde serializes bit-stably.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{ModelConfig, PolicyModel};
use crate::rng::RngState;
use crate::simenv::EnvConfig;

pub const MAGIC: [u8; 4] = *b"VCL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum FileKind {
    Trajectories = 1,
    Dataset = 2,
    Checkpoint = 3,
    Snapshots = 4,
    TrainState = 5,
}

impl FileKind {
    fn from_code(c: u32) -> Result<Self> {
        Ok(match c {
            1 => FileKind::Trajectories,
            2 => FileKind::Dataset,
            3 => FileKind::Checkpoint,
            4 => FileKind::Snapshots,
            5 => FileKind::TrainState,
            _ => return Err(Error::format(format!("unknown file kind {c}"))),
        })
    }
}

pub fn write_header<W: Write>(w: &mut W, kind: FileKind) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(kind as u32)?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R, expect: FileKind) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::format("bad magic; not a VCL container"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported format version {version} (tool speaks {FORMAT_VERSION})"
        )));
    }
    let kind = FileKind::from_code(r.read_u32::<LittleEndian>()?)?;
    if kind != expect {
        return Err(Error::format(format!("expected {expect:?} container, found {kind:?}")));
    }
    Ok(())
}

pub fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 30 {
        return Err(Error::format("oversized string"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("invalid utf8 string"))
}

pub fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    w.write_u64::<LittleEndian>(xs.len() as u64)?;
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut out = vec![0.0f64; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    w.write_u64::<LittleEndian>(xs.len() as u64)?;
    for &x in xs {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_f32s<R: Read>(r: &mut R) -> Result<Vec<f32>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut out = vec![0.0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn write_u16s<W: Write>(w: &mut W, xs: &[u16]) -> Result<()> {
    w.write_u64::<LittleEndian>(xs.len() as u64)?;
    for &x in xs {
        w.write_u16::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_u16s<R: Read>(r: &mut R) -> Result<Vec<u16>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut out = vec![0u16; n];
    r.read_u16_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Stage provenance entry: (stage tag, sha256 of that stage's checkpoint).
pub type Lineage = Vec<(String, String)>;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PolicyModel,
    pub stage: String,
    pub lineage: Lineage,
}

pub fn save_checkpoint(path: &Path, model: &PolicyModel, stage: &str, lineage: &Lineage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FileKind::Checkpoint)?;
    write_string(&mut w, &serde_json::to_string(&model.cfg)?)?;
    write_string(&mut w, stage)?;
    w.write_u32::<LittleEndian>(lineage.len() as u32)?;
    for (s, h) in lineage {
        write_string(&mut w, s)?;
        write_string(&mut w, h)?;
    }
    write_f64s(&mut w, &model.params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::MissingLineage(format!("{}: {e}", path.display())))?,
    );
    read_header(&mut r, FileKind::Checkpoint)?;
    let cfg: ModelConfig = serde_json::from_str(&read_string(&mut r)?)?;
    cfg.validate()?;
    let stage = read_string(&mut r)?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut lineage = Vec::with_capacity(n);
    for _ in 0..n {
        let s = read_string(&mut r)?;
        let h = read_string(&mut r)?;
        lineage.push((s, h));
    }
    let params = read_f64s(&mut r)?;
    let index = crate::policy::ParamIndex::new(&cfg);
    if params.len() != index.total {
        return Err(Error::format(format!(
            "checkpoint parameter count {} does not match config layout {}",
            params.len(),
            index.total
        )));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::numerical("checkpoint contains non-finite parameters"));
    }
    Ok(Checkpoint {
        model: PolicyModel { cfg, params, index },
        stage,
        lineage,
    })
}

/// Load a checkpoint and insist on an exact model configuration.
pub fn load_checkpoint_expecting(path: &Path, expect: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.model.cfg != expect {
        return Err(Error::format(format!(
            "checkpoint config mismatch at {}: file has {:?}, run expects {:?}",
            path.display(),
            ckpt.model.cfg,
            expect
        )));
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Dataset and trajectory files
// ---------------------------------------------------------------------------

/// The dataset rides as one JSON document inside a versioned container.
/// Pixels are not duplicated here; observations re-render from states.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FileKind::Dataset)?;
    write_string(&mut w, &serde_json::to_string(dataset)?)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::MissingLineage(format!("{}: {e}", path.display())))?,
    );
    read_header(&mut r, FileKind::Dataset)?;
    Ok(serde_json::from_str(&read_string(&mut r)?)?)
}

/// Trajectory records with explicit per-step pixels: header carries the
/// action dim, chunk length, image dims, and trajectory count; each step
/// stores the serialized state, the action, and the rendered frame as f32.
pub fn save_trajectories(
    path: &Path,
    trajectories: &[Trajectory],
    env: &EnvConfig,
    d_action: usize,
    horizon: usize,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FileKind::Trajectories)?;
    write_string(&mut w, &serde_json::to_string(env)?)?;
    w.write_u32::<LittleEndian>(d_action as u32)?;
    w.write_u32::<LittleEndian>(horizon as u32)?;
    w.write_u32::<LittleEndian>(env.img as u32)?;
    w.write_u32::<LittleEndian>(env.img as u32)?;
    w.write_u32::<LittleEndian>(env.channels as u32)?;
    w.write_u32::<LittleEndian>(trajectories.len() as u32)?;
    for traj in trajectories {
        write_string(&mut w, &serde_json::to_string(&traj.task)?)?;
        w.write_u32::<LittleEndian>(traj.id)?;
        w.write_u32::<LittleEndian>(traj.len() as u32)?;
        for (state, action) in &traj.steps {
            write_string(&mut w, &serde_json::to_string(state)?)?;
            write_f64s(&mut w, &action.delta)?;
            let obs = crate::simenv::render(state, env);
            let px: Vec<f32> = obs.pixels.iter().map(|&p| p as f32).collect();
            write_f32s(&mut w, &px)?;
        }
        write_string(&mut w, &serde_json::to_string(&traj.final_state)?)?;
    }
    w.flush()?;
    Ok(())
}

/// JSON inspection export of trajectory metadata: header, states, actions.
/// Pixel arrays stay in the binary container.
pub fn export_trajectories_json(path: &Path, trajectories: &[Trajectory], env: &EnvConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Export<'a> {
        env: &'a EnvConfig,
        trajectories: &'a [Trajectory],
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(serde_json::to_string_pretty(&Export { env, trajectories })?.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training state (kill-resume)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainState {
    pub stage: String,
    pub step: u64,
    pub params: Vec<f64>,
    pub opt_m: Vec<f64>,
    pub opt_v: Vec<f64>,
    pub rng: RngState,
}

pub fn save_train_state(path: &Path, st: &TrainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FileKind::TrainState)?;
    write_string(&mut w, &st.stage)?;
    w.write_u64::<LittleEndian>(st.step)?;
    write_f64s(&mut w, &st.params)?;
    write_f64s(&mut w, &st.opt_m)?;
    write_f64s(&mut w, &st.opt_v)?;
    w.write_all(&st.rng.seed)?;
    w.write_u64::<LittleEndian>((st.rng.word_pos & u128::from(u64::MAX)) as u64)?;
    w.write_u64::<LittleEndian>((st.rng.word_pos >> 64) as u64)?;
    w.flush()?;
    Ok(())
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, FileKind::TrainState)?;
    let stage = read_string(&mut r)?;
    let step = r.read_u64::<LittleEndian>()?;
    let params = read_f64s(&mut r)?;
    let opt_m = read_f64s(&mut r)?;
    let opt_v = read_f64s(&mut r)?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let lo = r.read_u64::<LittleEndian>()? as u128;
    let hi = r.read_u64::<LittleEndian>()? as u128;
    Ok(TrainState {
        stage,
        step,
        params,
        opt_m,
        opt_v,
        rng: RngState { seed, word_pos: lo | (hi << 64) },
    })
}

// ---------------------------------------------------------------------------
// Experiment manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

/// Per-run record of every produced artifact and its hash, in a stable key
/// order so the manifest itself is byte-deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config_hash: String,
    pub artifacts: BTreeMap<String, ArtifactRef>,
}

impl ExperimentManifest {
    pub fn new(run_id: &str, config_hash: &str) -> Self {
        ExperimentManifest {
            run_id: run_id.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingLineage(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    /// Hash `file` (which must live under `root`) and record it.
    pub fn record(&mut self, root: &Path, name: &str, file: &Path) -> Result<()> {
        let rel = file
            .strip_prefix(root)
            .map_err(|_| Error::config(format!("{} is outside the run dir", file.display())))?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactRef {
                path: rel.to_string_lossy().into_owned(),
                sha256: sha256_file(file)?,
            },
        );
        Ok(())
    }

    pub fn artifact_path(&self, root: &Path, name: &str) -> Result<PathBuf> {
        let art = self
            .artifacts
            .get(name)
            .ok_or_else(|| Error::MissingLineage(format!("manifest has no artifact '{name}'")))?;
        Ok(root.join(&art.path))
    }

    /// Check that every referenced artifact exists and hash-verifies.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (name, art) in &self.artifacts {
            let p = root.join(&art.path);
            if !p.exists() {
                return Err(Error::MissingLineage(format!(
                    "artifact '{name}' missing at {}",
                    p.display()
                )));
            }
            let h = sha256_file(&p)?;
            if h != art.sha256 {
                return Err(Error::format(format!(
                    "artifact '{name}' hash mismatch: manifest {} vs file {h}",
                    art.sha256
                )));
            }
        }
        Ok(())
    }
}

/// Append-safe JSONL metrics writer that knows how many lines it has
/// written, so a resumed run can truncate back to the persisted step.
pub struct MetricsWriter {
    path: PathBuf,
    lines: u64,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        File::create(path)?;
        Ok(MetricsWriter { path: path.to_path_buf(), lines: 0 })
    }

    /// Re-open keeping only the first `keep_lines` lines.
    pub fn resume(path: &Path, keep_lines: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).unwrap_or_default();
        let kept: Vec<&str> = text.lines().take(keep_lines as usize).collect();
        let lines = kept.len() as u64;
        let mut body = kept.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(MetricsWriter { path: path.to_path_buf(), lines })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(serde_json::to_string(record)?.as_bytes())?;
        f.write_all(b"\n")?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::HeadKind;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn tiny_model() -> PolicyModel {
        let cfg = ModelConfig {
            d_action: 2,
            horizon: 2,
            vocab: 5,
            width: 8,
            blocks: 1,
            heads: 2,
            mlp_hidden: 16,
            img_h: 8,
            img_w: 8,
            channels: 3,
            patch: 4,
            prompt_len: 4,
            prompt_vocab: 12,
            head: HeadKind::Discrete,
        };
        PolicyModel::init(cfg, 77).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tmpdir();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model();
        let lineage = vec![("stage0".to_string(), "ab".repeat(32))];
        save_checkpoint(&path, &model, "stage1", &lineage).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.stage, "stage1");
        assert_eq!(ck.lineage, lineage);
        assert_eq!(ck.model.params, model.params);
        assert_eq!(ck.model.cfg, model.cfg);
    }

    #[test]
    fn checkpoint_config_mismatch_fails_loudly() {
        let dir = tmpdir();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model();
        save_checkpoint(&path, &model, "stage0", &Vec::new()).unwrap();
        let mut other = model.cfg.clone();
        other.width = 16;
        assert!(load_checkpoint_expecting(&path, &other).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn train_state_round_trip() {
        let dir = tmpdir();
        let path = dir.path().join("state.bin");
        let rng = crate::rng::stream_rng(5, "x");
        let st = TrainState {
            stage: "stage1".into(),
            step: 123,
            params: vec![1.0, -2.0, 3.5],
            opt_m: vec![0.1; 3],
            opt_v: vec![],
            rng: RngState::capture(&rng),
        };
        save_train_state(&path, &st).unwrap();
        let back = load_train_state(&path).unwrap();
        assert_eq!(back.step, 123);
        assert_eq!(back.params, st.params);
        assert_eq!(back.opt_m, st.opt_m);
        assert_eq!(back.rng, st.rng);
    }

    #[test]
    fn manifest_verify_detects_tampering() {
        let dir = tmpdir();
        let file = dir.path().join("artifact.bin");
        std::fs::write(&file, b"payload").unwrap();
        let mut m = ExperimentManifest::new("run-1", "cfg-hash");
        m.record(dir.path(), "dataset", &file).unwrap();
        m.verify(dir.path()).unwrap();
        std::fs::write(&file, b"tampered").unwrap();
        assert!(m.verify(dir.path()).is_err());
    }

    #[test]
    fn metrics_writer_resume_truncates() {
        let dir = tmpdir();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for i in 0..5 {
            w.append(&serde_json::json!({ "step": i })).unwrap();
        }
        let w2 = MetricsWriter::resume(&path, 3).unwrap();
        assert_eq!(w2.lines(), 3);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
