//! Training, evaluation, checkpoints and run configuration.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod task;
pub mod train;

pub use audit::{audit_checkpoints, audit_model};
pub use checkpoint::{params_sha256, Checkpoint, CheckpointKind};
pub use config::RunConfig;
pub use eval::{evaluate, EvalOptions, Report};
pub use metrics::{ade, fde, marginal_score};
pub use task::{finetune_example, pretrain_example, Example};
pub use train::{finetune, pretrain, schedule, TrainReport};
