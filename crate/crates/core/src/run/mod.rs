//! Run configuration, training loop, run records and the command layer.

mod commands;
mod config;
mod protocol;
mod record;
mod trainer;

pub use commands::{cmd_datagen, cmd_eval, cmd_report, ComparisonTable, DatagenOptions, DatagenSummary, EvalCommand, EvalOutcome, EvalSplit, ReportRow};
pub use config::{RunConfig, CONFIG_FILE};
pub use protocol::{StageTwoRun, TwoStage, TwoStageOutcome};
pub use record::{append_event, read_events, RunEvent, RECORD_FILE};
pub use trainer::{run_training, EpochLog, Split, TrainSummary, Trainer, TrainingData, BEST_CHECKPOINT, LAST_CHECKPOINT};
