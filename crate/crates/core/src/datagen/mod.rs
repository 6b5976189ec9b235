//! Dataset construction: expert trajectory collection, sliding-window
//! chunking, track segmentation and filtering, overlay annotation, and
//! prompt templating. Builds the instruction-following set and its
//! track-annotated counterpart with a pairing bijection between them.

pub mod overlay;
pub mod prompts;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::tokenizer::tokenize_actions;
use crate::rng::stream_rng;
use crate::simenv::{
    ground_truth_tracks, init_world, is_success, make_tasks, render, scripted_expert, step, Action,
    EnvConfig, Observation, TaskSpec, WorldState,
};

pub use prompts::{make_prompts, PromptMode, PROMPT_LEN, PROMPT_VOCAB};

/// Static-action filter threshold on the action norm.
pub const STATIC_ACTION_EPS: f64 = 1e-3;

/// Track filter thresholds, in pixels.
pub const STATIC_DISPLACEMENT_PX: f64 = 2.0;
pub const ABRUPT_DISPLACEMENT_PX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u32,
    pub task: TaskSpec,
    /// State before each action, paired with the action taken.
    pub steps: Vec<(WorldState, Action)>,
    pub final_state: WorldState,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn state(&self, t: usize) -> &WorldState {
        if t < self.steps.len() {
            &self.steps[t].0
        } else {
            &self.final_state
        }
    }

    pub fn observe(&self, t: usize, env: &EnvConfig) -> Observation {
        render(self.state(t), env)
    }

    /// Replay the stored actions from the first state and check that every
    /// stored state (and so every rendered observation) is reproduced.
    pub fn replays_consistently(&self, env: &EnvConfig) -> bool {
        if self.steps.is_empty() {
            return true;
        }
        let mut state = self.steps[0].0.clone();
        for (stored, action) in &self.steps {
            if stored != &state {
                return false;
            }
            state = step(&state, action, env);
        }
        state == self.final_state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Kept,
    Static,
    Inconsistent,
    Abrupt,
}

impl FilterReason {
    pub fn code(self) -> u8 {
        match self {
            FilterReason::Kept => 0,
            FilterReason::Static => 1,
            FilterReason::Inconsistent => 2,
            FilterReason::Abrupt => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => FilterReason::Kept,
            1 => FilterReason::Static,
            2 => FilterReason::Inconsistent,
            3 => FilterReason::Abrupt,
            _ => return Err(Error::format(format!("bad filter reason code {c}"))),
        })
    }
}

/// One point's pixel trajectory over a frame window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub start_frame: usize,
    pub points: Vec<[f64; 2]>,
    pub active: bool,
    pub filter_reason: FilterReason,
}

impl Track {
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.points.len()
    }
}

/// L1 frame-to-frame displacements of a point sequence.
fn displacements(points: &[[f64; 2]]) -> Vec<f64> {
    points
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).abs() + (w[1][1] - w[0][1]).abs())
        .collect()
}

/// Classify one track against the three activity rules, in order: static
/// (mean displacement below 2 px), inconsistent (fewer than a quarter of the
/// frames move more than 2 px), abrupt (any single hop above 10 px).
pub fn classify_track(points: &[[f64; 2]]) -> Result<FilterReason> {
    if points.len() < 2 {
        return Err(Error::config("track window must cover at least 2 frames"));
    }
    let d = displacements(points);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    if mean < STATIC_DISPLACEMENT_PX {
        return Ok(FilterReason::Static);
    }
    let moving = d.iter().filter(|&&x| x > STATIC_DISPLACEMENT_PX).count();
    if (moving as f64) < points.len() as f64 / 4.0 {
        return Ok(FilterReason::Inconsistent);
    }
    if d.iter().any(|&x| x > ABRUPT_DISPLACEMENT_PX) {
        return Ok(FilterReason::Abrupt);
    }
    Ok(FilterReason::Kept)
}

/// Apply the activity rules to every track, setting `filter_reason` and
/// `active`.
pub fn filter_tracks(mut tracks: Vec<Track>) -> Result<Vec<Track>> {
    for t in &mut tracks {
        let reason = classify_track(&t.points)?;
        t.filter_reason = reason;
        t.active = reason == FilterReason::Kept;
    }
    Ok(tracks)
}

/// Segment starts for a trajectory of `len` frames: `{0, len-overlap, ...}`
/// while a full segment fits; short trajectories get a single full-length
/// segment.
pub fn segment_starts(len: usize, segment_len: usize, overlap: usize) -> Vec<usize> {
    if len < segment_len {
        return vec![0];
    }
    let stride = segment_len - overlap;
    let mut starts = Vec::new();
    let mut s = 0;
    while s + segment_len <= len {
        starts.push(s);
        s += stride;
    }
    starts
}

/// Seed a uniform grid of points at each segment start and project them
/// through the segment, then classify activity.
pub fn segment_and_track(
    traj: &Trajectory,
    segment_len: usize,
    overlap: usize,
    grid_n: usize,
    env: &EnvConfig,
) -> Result<Vec<Track>> {
    let t = traj.len();
    if t < 2 {
        return Ok(Vec::new());
    }
    let states: Vec<WorldState> = (0..t).map(|i| traj.state(i).clone()).collect();
    let mut tracks = Vec::new();
    for start in segment_starts(t, segment_len, overlap) {
        let end = (start + segment_len).min(t);
        let raw = ground_truth_tracks(&states[start..end], grid_n, env)?;
        for r in raw {
            tracks.push(Track {
                start_frame: start,
                points: r.points,
                active: false,
                filter_reason: FilterReason::Kept,
            });
        }
    }
    filter_tracks(tracks)
}

/// One instruction-following training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSample {
    pub traj_id: u32,
    pub t: usize,
    pub instruction: Vec<u16>,
    /// H x D continuous actions, flat row-major.
    pub actions: Vec<f64>,
    /// M tokenized actions.
    pub tokens: Vec<u16>,
    /// Count of trailing steps padded by repeating the last real action.
    pub pad_len: usize,
    /// Index linking to the annotated counterpart, -1 when none exists.
    pub pair_id: i64,
    pub holdout: bool,
}

/// The track-annotated counterpart of a [`ChunkSample`]. Action labels are
/// identical to the paired sample; the observation gains a track overlay and
/// the prompt switches mode token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedChunkSample {
    pub pair_id: i64,
    pub traj_id: u32,
    pub t: usize,
    pub track_instruction: Vec<u16>,
    pub actions: Vec<f64>,
    pub tokens: Vec<u16>,
    pub pad_len: usize,
    /// Indices into the trajectory's track list, sorted.
    pub sampled_tracks: Vec<u32>,
    pub holdout: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub tracks_kept: usize,
    pub tracks_static: usize,
    pub tracks_inconsistent: usize,
    pub tracks_abrupt: usize,
    pub samples_total: usize,
    pub samples_skipped_no_tracks: usize,
    pub tokenizer_clamped: usize,
}

impl DatasetStats {
    pub fn tracks_total(&self) -> usize {
        self.tracks_kept + self.tracks_static + self.tracks_inconsistent + self.tracks_abrupt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub demos_per_task: usize,
    pub segment_len: usize,
    pub segment_overlap: usize,
    pub grid_n: usize,
    /// Active tracks sampled per annotated image.
    pub n_sample_tracks: usize,
    /// Fraction of trajectories per task held out for monitoring.
    pub holdout_frac: f64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            demos_per_task: 25,
            segment_len: 32,
            segment_overlap: 16,
            grid_n: 196,
            n_sample_tracks: 8,
            holdout_frac: 0.1,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demos_per_task == 0 {
            return Err(Error::config("demos_per_task must be positive"));
        }
        if self.segment_len < 2 || self.segment_overlap >= self.segment_len {
            return Err(Error::config("need segment_overlap < segment_len, segment_len >= 2"));
        }
        if self.grid_n == 0 || self.n_sample_tracks == 0 {
            return Err(Error::config("grid_n and n_sample_tracks must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::config("holdout_frac must be in [0, 1)"));
        }
        Ok(())
    }
}

/// The paired dataset: trajectories, per-trajectory tracks, and both sample
/// sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub env: EnvConfig,
    pub d_action: usize,
    pub horizon: usize,
    pub vocab: usize,
    pub trajectories: Vec<Trajectory>,
    pub tracks: Vec<Vec<Track>>,
    pub instr_samples: Vec<ChunkSample>,
    pub tracked_samples: Vec<TrackedChunkSample>,
    pub stats: DatasetStats,
}

impl Dataset {
    pub fn observe(&self, traj_id: u32, t: usize) -> Observation {
        self.trajectories[traj_id as usize].observe(t, &self.env)
    }

    /// Render the annotated observation for a tracked sample: the frame at
    /// `t` plus the sampled tracks drawn over `[t, t+H)`.
    pub fn annotated_observe(&self, sample: &TrackedChunkSample) -> Observation {
        let mut obs = self.observe(sample.traj_id, sample.t);
        let track_list = &self.tracks[sample.traj_id as usize];
        let selected: Vec<&Track> = sample
            .sampled_tracks
            .iter()
            .map(|&i| &track_list[i as usize])
            .collect();
        overlay::overlay_tracks(&mut obs, &selected, sample.t, sample.t + self.horizon);
        obs
    }

    /// Pairs of (instruction sample index, tracked sample index), training
    /// split only.
    pub fn paired_indices(&self, holdout: bool) -> Vec<(usize, usize)> {
        self.tracked_samples
            .iter()
            .enumerate()
            .filter(|(_, ts)| ts.holdout == holdout)
            .map(|(ti, ts)| (ts.pair_id as usize, ti))
            .collect()
    }

    pub fn instr_indices(&self, holdout: bool) -> Vec<usize> {
        self.instr_samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.holdout == holdout)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn tracked_indices(&self, holdout: bool) -> Vec<usize> {
        self.tracked_samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.holdout == holdout)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Roll the scripted expert on every task until success, dropping static
/// steps (action norm below 1e-3). Every trajectory must succeed.
pub fn collect_trajectories(
    env: &EnvConfig,
    n_tasks: usize,
    demos_per_task: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let tasks = make_tasks(env);
    if n_tasks > tasks.len() {
        return Err(Error::config(format!("only {} tasks available", tasks.len())));
    }
    let mut out = Vec::with_capacity(n_tasks * demos_per_task);
    let mut id = 0u32;
    for task in tasks.iter().take(n_tasks) {
        for demo in 0..demos_per_task {
            let mut rng = stream_rng(seed, &format!("demo-{}-{demo}", task.task_id));
            let mut state = init_world(task, env, &mut rng);
            let mut steps = Vec::new();
            let mut solved = false;
            for _ in 0..env.t_max {
                if is_success(&state, task) {
                    solved = true;
                    break;
                }
                let action = scripted_expert(&state, task, env);
                let next = step(&state, &action, env);
                steps.push((state, action));
                state = next;
            }
            solved = solved || is_success(&state, task);
            if !solved {
                return Err(Error::numerical(format!(
                    "scripted expert failed on task {} demo {demo}",
                    task.task_id
                )));
            }
            steps.retain(|(_, a)| a.norm() >= STATIC_ACTION_EPS);
            out.push(Trajectory {
                id,
                task: task.clone(),
                steps,
                final_state: state,
            });
            id += 1;
        }
    }
    Ok(out)
}

/// Chunk actions at `t`: H consecutive actions, padding past the end by
/// repeating the last real action. Returns (flat H x D actions, pad count).
pub fn chunk_actions(traj: &Trajectory, t: usize, horizon: usize) -> (Vec<f64>, usize) {
    let t_len = traj.len();
    let mut actions = Vec::with_capacity(horizon * 3);
    let mut pad = 0;
    for k in 0..horizon {
        let idx = t + k;
        let a = if idx < t_len {
            traj.steps[idx].1
        } else {
            pad += 1;
            traj.steps[t_len - 1].1
        };
        actions.extend_from_slice(&a.delta);
    }
    (actions, pad)
}

/// Build the paired dataset from scratch. Deterministic in `seed`.
pub fn build_dataset(
    env: &EnvConfig,
    gen: &DataGenConfig,
    horizon: usize,
    vocab: usize,
    seed: u64,
) -> Result<Dataset> {
    env.validate()?;
    gen.validate()?;
    let trajectories = collect_trajectories(env, env.n_tasks, gen.demos_per_task, seed)?;
    let holdout_from = gen.demos_per_task - (gen.demos_per_task as f64 * gen.holdout_frac).ceil() as usize;

    let mut stats = DatasetStats::default();
    let mut all_tracks = Vec::with_capacity(trajectories.len());
    for traj in &trajectories {
        let tracks = segment_and_track(traj, gen.segment_len, gen.segment_overlap, gen.grid_n, env)?;
        for tr in &tracks {
            match tr.filter_reason {
                FilterReason::Kept => stats.tracks_kept += 1,
                FilterReason::Static => stats.tracks_static += 1,
                FilterReason::Inconsistent => stats.tracks_inconsistent += 1,
                FilterReason::Abrupt => stats.tracks_abrupt += 1,
            }
        }
        all_tracks.push(tracks);
    }

    let mut instr_samples = Vec::new();
    let mut tracked_samples = Vec::new();
    for traj in &trajectories {
        let holdout = (traj.id as usize % gen.demos_per_task) >= holdout_from;
        let instruction = make_prompts(&traj.task, PromptMode::Instruction, horizon)?;
        let track_instruction = make_prompts(&traj.task, PromptMode::Track, horizon)?;
        let tracks = &all_tracks[traj.id as usize];
        for t in 0..traj.len() {
            let (actions, pad_len) = chunk_actions(traj, t, horizon);
            let tk = tokenize_actions(&actions, vocab);
            stats.tokenizer_clamped += tk.clamped;
            stats.samples_total += 1;
            let sample_idx = instr_samples.len();

            // Kept tracks with at least 2 frames inside [t, t+H).
            let eligible: Vec<u32> = tracks
                .iter()
                .enumerate()
                .filter(|(_, tr)| {
                    tr.active && {
                        let lo = tr.start_frame.max(t);
                        let hi = tr.end_frame().min(t + horizon);
                        hi.saturating_sub(lo) >= 2
                    }
                })
                .map(|(i, _)| i as u32)
                .collect();

            let pair_id = if eligible.is_empty() {
                stats.samples_skipped_no_tracks += 1;
                -1
            } else {
                let mut rng = stream_rng(seed, &format!("annotate-{}-{t}", traj.id));
                let mut chosen: Vec<u32> = eligible
                    .choose_multiple(&mut rng, gen.n_sample_tracks.min(eligible.len()))
                    .copied()
                    .collect();
                chosen.sort_unstable();
                tracked_samples.push(TrackedChunkSample {
                    pair_id: sample_idx as i64,
                    traj_id: traj.id,
                    t,
                    track_instruction: track_instruction.clone(),
                    actions: actions.clone(),
                    tokens: tk.tokens.clone(),
                    pad_len,
                    sampled_tracks: chosen,
                    holdout,
                });
                sample_idx as i64
            };

            instr_samples.push(ChunkSample {
                traj_id: traj.id,
                t,
                instruction: instruction.clone(),
                actions,
                tokens: tk.tokens,
                pad_len,
                pair_id,
                holdout,
            });
        }
    }

    Ok(Dataset {
        env: env.clone(),
        d_action: 3,
        horizon,
        vocab,
        trajectories,
        tracks: all_tracks,
        instr_samples,
        tracked_samples,
        stats,
    })
}
