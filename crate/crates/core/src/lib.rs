//! Desk-scale laboratory for visual conditioning in tiny vision-language-
//! action policies: a deterministic 2-D manipulation world, a hand-
//! backpropagated transformer policy with discrete and continuous action
//! experts, track-following preference optimization, latent distillation,
//! a forward-diffusion visual-conditioning probe, and a closed-loop
//! evaluation harness.

pub mod config;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod evalharness;
pub mod io;
pub mod policy;
pub mod prefopt;
pub mod probe;
pub mod rng;
pub mod simenv;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use policy::{GradientBundle, HeadKind, LatentSet, ModelConfig, PolicyModel, TokenDistribution};
pub use simenv::{Action, EnvConfig, Observation, TaskSpec, WorldState};
