//! AdamW with warmup + cosine schedule, the training loop and evaluation.

mod optim;
mod run;
mod schedule;

pub use optim::{adamw_step, AdamWParams, OptimState};
pub use run::{evaluate, train, train_step, EpochLog, TrainOptions, TrainOutcome, LOG_FILE, META_FILE};
pub use schedule::{lr_at, ScheduleSpec};
