//! Experiment orchestration: source pretraining, the three fine-tuning
//! strategies over a shots × rank × seed grid, checkpoint selection and
//! result tables.

mod plan;
mod runs;
mod table;
mod train;

pub use plan::{AdapterSettings, Cell, DatasetSource, ExperimentPlan, PretrainConfig, Strategy};
pub use runs::{select_checkpoint, PretrainResult, RunResult, TracePoint, Workspace};
pub use table::{aggregate, mean_std, read_table, trend, trend_markdown, write_table, ResultTable, TableCell, TrendRow};
pub use train::{evaluate_detector, probe_loss, train, EpochLog, LrSchedule, Samples, TrainConfig};
