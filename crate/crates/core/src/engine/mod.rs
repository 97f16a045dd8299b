//! The training loop: base-device passes, adaptation buffers and intervals.

mod records;
mod trainer;

pub use records::{AdaptationRecord, Buffer};
pub use trainer::{
    base_pass, evaluate, init_adapters, run_training, BasePass, Counters, Evaluation, RunData, StepReport,
    Trainer, TrainingConfig, TrainingOutcome, Variant,
};
