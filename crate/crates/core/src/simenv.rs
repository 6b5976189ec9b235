//! Deterministic 2-D tabletop world.
//!
//! The agent moves in [0,1]^2, grasps objects within a fixed radius, and
//! drops them into a goal region. Everything is a pure function of state:
//! stepping, rendering, the scripted expert, and ground-truth point tracks.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape half-extents in world units.
const OBJ_HALF: f64 = 0.06;
const AGENT_HALF: f64 = 0.06;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub img: usize,
    pub channels: usize,
    pub n_tasks: usize,
    /// World units moved per unit action component.
    pub max_step: f64,
    pub grasp_radius: f64,
    /// Success tolerance epsilon on the object-to-goal distance.
    pub success_eps: f64,
    /// Rendered goal disk radius.
    pub goal_radius: f64,
    /// Step budget within which the scripted expert must finish.
    pub t_max: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            img: 32,
            channels: 3,
            n_tasks: 8,
            max_step: 0.08,
            grasp_radius: 0.06,
            success_eps: 0.05,
            goal_radius: 0.08,
            t_max: 64,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.img < 8 || self.channels != 3 {
            return Err(Error::config("env requires img >= 8 and 3 channels"));
        }
        if self.n_tasks == 0 || self.n_tasks > 16 {
            return Err(Error::config("n_tasks must be in 1..=16"));
        }
        if !(self.max_step > 0.0 && self.grasp_radius > 0.0 && self.success_eps > 0.0) {
            return Err(Error::config("env distances must be positive"));
        }
        if self.t_max < 8 {
            return Err(Error::config("t_max too small for any task"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: u32,
    pub pos: [f64; 2],
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub object_id: u32,
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_pos: [f64; 2],
    pub gripper_closed: bool,
    pub objects: Vec<ObjectState>,
    pub goals: Vec<Goal>,
}

/// One control command: (dx, dy, gripper), each in [-1, 1]. Gripper < 0
/// closes, >= 0 opens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub delta: [f64; 3],
}

impl Action {
    pub const ZERO: Action = Action { delta: [0.0; 3] };

    pub fn norm(&self) -> f64 {
        self.delta.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub target_object: u32,
    /// Nominal goal placement; the realized goal center is jittered per
    /// episode around this anchor.
    pub goal_anchor: [f64; 2],
    pub tolerance: f64,
}

/// Rendered image, channel-interleaved rows, all values in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Observation {
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.pixels[base..base + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let base = (y * self.width + x) * self.channels;
        &mut self.pixels[base..base + self.channels]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp01(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// The fixed task menu: target object alternates, goal anchors cycle over
/// four sites along the lower half of the board.
pub fn make_tasks(env: &EnvConfig) -> Vec<TaskSpec> {
    let anchors = [[0.2, 0.78], [0.8, 0.78], [0.32, 0.55], [0.68, 0.55]];
    (0..env.n_tasks as u32)
        .map(|id| TaskSpec {
            task_id: id,
            target_object: id % 2,
            goal_anchor: anchors[(id as usize / 2) % anchors.len()],
            tolerance: env.success_eps,
        })
        .collect()
}

/// Jittered initial state for one episode of `task`.
pub fn init_world(task: &TaskSpec, env: &EnvConfig, rng: &mut ChaCha12Rng) -> WorldState {
    let mut jitter = |c: [f64; 2], r: f64| -> [f64; 2] {
        let dx: f64 = rng.gen_range(-r..=r);
        let dy: f64 = rng.gen_range(-r..=r);
        [(c[0] + dx).clamp(0.08, 0.92), (c[1] + dy).clamp(0.08, 0.92)]
    };
    let obj0 = jitter([0.25, 0.22], 0.10);
    let obj1 = jitter([0.75, 0.22], 0.10);
    let agent = jitter([0.5, 0.42], 0.12);
    let goal = jitter(task.goal_anchor, 0.07);
    WorldState {
        agent_pos: agent,
        gripper_closed: false,
        objects: vec![
            ObjectState { id: 0, pos: obj0, held: false },
            ObjectState { id: 1, pos: obj1, held: false },
        ],
        goals: vec![Goal {
            object_id: task.target_object,
            center: goal,
            radius: env.goal_radius,
        }],
    }
}

/// Re-aim an existing world at a new task: positions persist, the goal is
/// re-sampled around the new anchor. Used by sequential task chains.
pub fn retarget(state: &WorldState, task: &TaskSpec, env: &EnvConfig, rng: &mut ChaCha12Rng) -> WorldState {
    let mut next = state.clone();
    let dx: f64 = rng.gen_range(-0.07..=0.07);
    let dy: f64 = rng.gen_range(-0.07..=0.07);
    next.goals = vec![Goal {
        object_id: task.target_object,
        center: [
            (task.goal_anchor[0] + dx).clamp(0.08, 0.92),
            (task.goal_anchor[1] + dy).clamp(0.08, 0.92),
        ],
        radius: env.goal_radius,
    }];
    next
}

/// Task success: target object inside the tolerance disk with the gripper
/// open. No dwell requirement.
pub fn is_success(state: &WorldState, task: &TaskSpec) -> bool {
    let goal = &state.goals[0];
    let obj = &state.objects[task.target_object as usize];
    !state.gripper_closed && dist(obj.pos, goal.center) <= task.tolerance
}

/// Deterministic world transition. Components clamp to [-1, 1]; positions
/// clamp to the unit square; grasping engages while the gripper is closed,
/// empty, and within reach; release happens on the closed -> open edge.
pub fn step(state: &WorldState, action: &Action, env: &EnvConfig) -> WorldState {
    let mut next = state.clone();
    let dx = action.delta[0].clamp(-1.0, 1.0) * env.max_step;
    let dy = action.delta[1].clamp(-1.0, 1.0) * env.max_step;
    next.agent_pos = clamp01([state.agent_pos[0] + dx, state.agent_pos[1] + dy]);
    let want_closed = action.delta[2].clamp(-1.0, 1.0) < 0.0;

    if !want_closed && state.gripper_closed {
        for obj in &mut next.objects {
            obj.held = false;
        }
    }
    next.gripper_closed = want_closed;

    let any_held = next.objects.iter().any(|o| o.held);
    if want_closed && !any_held {
        let mut best: Option<(usize, f64)> = None;
        for (i, obj) in next.objects.iter().enumerate() {
            let d = dist(next.agent_pos, obj.pos);
            if d <= env.grasp_radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            next.objects[i].held = true;
        }
    }
    for obj in &mut next.objects {
        if obj.held {
            obj.pos = next.agent_pos;
        }
    }
    next
}

/// Greedy proportional controller: reach, grasp, carry, release.
/// Returns the zero action once the task is satisfied.
pub fn scripted_expert(state: &WorldState, task: &TaskSpec, env: &EnvConfig) -> Action {
    if is_success(state, task) {
        return Action::ZERO;
    }
    let towards = |from: [f64; 2], to: [f64; 2]| -> [f64; 2] {
        [
            ((to[0] - from[0]) / env.max_step).clamp(-1.0, 1.0),
            ((to[1] - from[1]) / env.max_step).clamp(-1.0, 1.0),
        ]
    };
    let target = &state.objects[task.target_object as usize];
    let goal = state.goals[0].center;
    if !target.held {
        let d = towards(state.agent_pos, target.pos);
        let close_enough = dist(state.agent_pos, target.pos) <= env.grasp_radius * 0.6;
        let grip = if close_enough { -1.0 } else { 1.0 };
        Action { delta: [d[0], d[1], grip] }
    } else if dist(state.agent_pos, goal) > task.tolerance * 0.5 {
        let d = towards(state.agent_pos, goal);
        Action { delta: [d[0], d[1], -1.0] }
    } else {
        Action { delta: [0.0, 0.0, 1.0] }
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

const COLOR_BG: [f64; 3] = [-1.0, -1.0, -1.0];
const COLOR_GOAL: [f64; 3] = [0.25, 0.25, -1.0];
const COLOR_OBJ0: [f64; 3] = [-1.0, 1.0, -1.0];
const COLOR_OBJ1: [f64; 3] = [-1.0, -1.0, 1.0];
const COLOR_AGENT_OPEN: [f64; 3] = [0.5, -1.0, -1.0];
const COLOR_AGENT_CLOSED: [f64; 3] = [1.0, -1.0, -1.0];

/// World coordinate of the center of pixel (y, x).
fn pixel_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Continuous pixel coordinate of a world point (x axis shown; y symmetric).
pub fn world_to_px(x: f64, n: usize) -> f64 {
    (x * n as f64 - 0.5).clamp(0.0, n as f64 - 1.0)
}

/// Pure rasterization of a state: flat-shaded goal disk, object square and
/// disk, agent square on top.
pub fn render(state: &WorldState, env: &EnvConfig) -> Observation {
    let n = env.img;
    let mut obs = Observation {
        height: n,
        width: n,
        channels: 3,
        pixels: Vec::with_capacity(n * n * 3),
    };
    for _ in 0..n * n {
        obs.pixels.extend_from_slice(&COLOR_BG);
    }
    let paint = |obs: &mut Observation, test: &dyn Fn(f64, f64) -> bool, color: [f64; 3]| {
        for y in 0..n {
            let wy = pixel_center(y, n);
            for x in 0..n {
                let wx = pixel_center(x, n);
                if test(wx, wy) {
                    obs.pixel_mut(y, x).copy_from_slice(&color);
                }
            }
        }
    };
    for goal in &state.goals {
        let c = goal.center;
        let r = goal.radius;
        paint(&mut obs, &|wx, wy| dist([wx, wy], c) <= r, COLOR_GOAL);
    }
    for obj in &state.objects {
        let p = obj.pos;
        if obj.id % 2 == 0 {
            paint(
                &mut obs,
                &|wx, wy| (wx - p[0]).abs() <= OBJ_HALF && (wy - p[1]).abs() <= OBJ_HALF,
                COLOR_OBJ0,
            );
        } else {
            paint(&mut obs, &|wx, wy| dist([wx, wy], p) <= OBJ_HALF, COLOR_OBJ1);
        }
    }
    let a = state.agent_pos;
    let color = if state.gripper_closed { COLOR_AGENT_CLOSED } else { COLOR_AGENT_OPEN };
    paint(
        &mut obs,
        &|wx, wy| (wx - a[0]).abs() <= AGENT_HALF && (wy - a[1]).abs() <= AGENT_HALF,
        color,
    );
    obs
}

// ---------------------------------------------------------------------------
// Ground-truth tracks
// ---------------------------------------------------------------------------

/// A raw point trajectory in continuous pixel coordinates, one point per
/// state in the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrack {
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy)]
enum Attachment {
    Background,
    Agent { offset: [f64; 2] },
    Object { index: usize, offset: [f64; 2] },
}

fn attach(point: [f64; 2], state: &WorldState) -> Attachment {
    let a = state.agent_pos;
    if (point[0] - a[0]).abs() <= AGENT_HALF && (point[1] - a[1]).abs() <= AGENT_HALF {
        return Attachment::Agent { offset: [point[0] - a[0], point[1] - a[1]] };
    }
    // Topmost object wins; objects render in id order, so scan back to front.
    for (i, obj) in state.objects.iter().enumerate().rev() {
        let p = obj.pos;
        let inside = if obj.id % 2 == 0 {
            (point[0] - p[0]).abs() <= OBJ_HALF && (point[1] - p[1]).abs() <= OBJ_HALF
        } else {
            dist(point, p) <= OBJ_HALF
        };
        if inside {
            return Attachment::Object { index: i, offset: [point[0] - p[0], point[1] - p[1]] };
        }
    }
    Attachment::Background
}

/// Project a uniform grid of world points through the state window. Points
/// covered by the agent or an object at the first state ride that entity;
/// the rest are static scene points.
pub fn ground_truth_tracks(states: &[WorldState], grid_n: usize, env: &EnvConfig) -> Result<Vec<RawTrack>> {
    if states.len() < 2 {
        return Err(Error::config("window too short: need at least 2 states for tracks"));
    }
    let side = (grid_n as f64).sqrt().ceil() as usize;
    let n = env.img;
    let mut tracks = Vec::with_capacity(grid_n);
    'outer: for gy in 0..side {
        for gx in 0..side {
            if tracks.len() == grid_n {
                break 'outer;
            }
            let point = [(gx as f64 + 0.5) / side as f64, (gy as f64 + 0.5) / side as f64];
            let attachment = attach(point, &states[0]);
            let mut points = Vec::with_capacity(states.len());
            for state in states {
                let world = match attachment {
                    Attachment::Background => point,
                    Attachment::Agent { offset } => {
                        [state.agent_pos[0] + offset[0], state.agent_pos[1] + offset[1]]
                    }
                    Attachment::Object { index, offset } => {
                        let p = state.objects[index].pos;
                        [p[0] + offset[0], p[1] + offset[1]]
                    }
                };
                points.push([world_to_px(world[0], n), world_to_px(world[1], n)]);
            }
            tracks.push(RawTrack { points });
        }
    }
    Ok(tracks)
}
