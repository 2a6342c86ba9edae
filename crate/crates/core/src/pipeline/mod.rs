//! Orchestration, configuration, file formats and reports.

pub mod config;
pub mod formats;
pub mod report;
pub mod run;

pub use config::{EvalConfig, InputConfig, MspStageConfig, PipelineConfig, TrainingConfig, DEFAULT_SUITE_SEED};
pub use formats::{
    read_annotations, read_candidates, read_json, read_jsonl, read_mhd, write_annotations, write_candidates,
    write_json, write_jsonl, write_mhd,
};
pub use report::{render_text, RunReport, Timings};
pub use run::{run_pipeline, sweep, RunOutcome, SweepRow};
