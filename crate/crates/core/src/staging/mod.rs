//! The staged training engine: AdamW, trainability masks, the activation
//! regularisation baseline and the select → attach → train → fuse loop.

mod engine;
mod optimizer;
mod plan;
mod regu;
mod trainability;

pub use engine::{pre_assess, run_training, MetricRow, StageReport, Trainer, TrainingOutcome, TRAIN_FRACTION};
pub use optimizer::{AdamWConfig, OptimizerState};
pub use plan::{StagePlan, TrainMode, STAGE_LR_DECAY};
pub use regu::{act_regu_penalty, act_regu_value};
pub use trainability::{build_trainability_mask, ParamMask, TrainabilityMask};
