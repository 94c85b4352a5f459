//! Optimizer and the two-stage training schedule.

pub mod adam;
pub mod run;

pub use adam::{adam_step, AdamState, OptimizerConfig, StepOutcome};
pub use run::{
    read_log, resume_stage, run_stage, train_full, RunDir, StageLog, StagePlan, StepRecord,
    TrainConfig,
};
