//! Deterministic 2-D sprite manipulation world with annotated demonstrations.

pub mod episode;
pub mod error;
pub mod io;
pub mod scene;
pub mod stats;
pub mod validate;
pub mod vocab;

pub use episode::{
    filter_noops, generate_episode, generate_raw, initial_scene, rollout_scene, Episode, EpisodeFrame, FrameAnnotation,
    InstanceAnnotation, ScenarioConfig, Subset,
};
pub use error::{Result, WorldError};
pub use scene::Scene;
