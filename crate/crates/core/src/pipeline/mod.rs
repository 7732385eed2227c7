//! Synthetic tasks, FLOP accounting and the training pipelines.

pub mod compare;
pub mod config;
pub mod data;
pub mod flops;
pub mod run;
pub mod runlog;

pub use compare::{compare_pipelines, CompareMode, ComparisonRow, ComparisonTable};
pub use config::{PipelineConfig, PipelineKind};
pub use data::{SyntheticTask, TaskKind};
pub use flops::{count_flops, pipeline_cost, Phase, StageFlops};
pub use run::{run_pipeline, GrowStage, PipelineRun, StageRun};
pub use runlog::{LogEntry, RunLog, StepEntry};
