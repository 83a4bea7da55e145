//! Policy networks, PPO, tabular baselines and evaluation.

pub mod eval;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod vi;

use std::io;

use thiserror::Error;

use crate::env::EnvError;

pub use eval::{
    action_match_rate, evaluate_success_map, free_grid_starts, greedy_action_table, rolling_mean, steps_to_sustained, ActionMatch,
    EvalPolicy, EvalReport, StartVisits, SuccessGrid, SuccessMap, TablePolicy, UniformPolicy,
};
pub use policy::{load_checkpoint, save_checkpoint, PolicyNet, PolicySpec};
pub use ppo::{
    collect_rollout, compute_gae, ppo_loss, ppo_update, train, CurvePoint, EpisodeRecord, PpoConfig, Progress, ResumeState, RolloutState, TrainOptions,
    TrainOutcome, Trajectory, UpdateStats,
};
pub use vi::{evaluate_policy_finite, follow_table, value_iteration, ValueIteration};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {what} during update")]
    NonFinite { what: String },
    #[error("clip {clip} has no frames; its match rate is undefined")]
    EmptyClip { clip: usize },
    #[error("action space mismatch: policy has {policy} actions, data has {data}")]
    ActionSpace { policy: usize, data: usize },
    #[error("not a checkpoint file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint was written for a different network")]
    SpecMismatch,
    #[error("requires the grid environment")]
    NotGrid,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}
