//! Patch-embedding vision transformer, its optimizer and training loop.

mod checkpoint;
mod config;
mod network;
mod optim;
mod train;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LrSchedule, MaskInit, MaskMode, Schedule, TrainConfig, Variant};
pub use network::{initial_mask_pair, ForwardOutput, InputNorm, Model, Param, ParamKind, LAYER_NORM_EPS};
pub use optim::AdamW;
pub use train::{evaluate, train, EpochMetrics, RngState, StepLog, TrainEvent, TrainReport, EVAL_CHUNK};

/// Builds a freshly initialized model of the given variant.
pub fn build_model(config: &TrainConfig, variant: Variant) -> crate::Result<Model> {
    Model::new(config, variant)
}
