//! Staged training: per-branch instruction tuning, contrastive alignment of
//! the projections, then fusion QA with LoRA on the decoder.

mod adam;
mod config;
pub mod data;
mod pipeline;
mod run;
mod stage;

#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{EvalConfig, RunConfig, Schedule, TrainConfig};
pub use pipeline::{
    ablate, ablated_stages, meta_path, resume, run_stages, single_skip, train_pipeline, Checkpoint, CheckpointMeta,
    Trained,
};
pub use run::{run_stage, stage_data, StageRecord};
pub use stage::{check_order, parse_stage_list, StageFamily, StageId, StageSpec};
