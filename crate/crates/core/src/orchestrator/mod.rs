//! Training pipelines, evaluation over modality masks, checkpoints and
//! result files.
//!
//! A pipeline is a fixed sequence of stages per (setting, task) pair.
//! Encoders carry over between stages; the fusion module is re-initialized
//! at the first multimodal stage. Every stage reads data through an access
//! log, so tests can check which splits and modalities it touched.

mod checkpoint;
mod config;
mod eval;
mod pipeline;
mod report;
mod stages;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use config::{EvalSection, ModelSection, RunConfig, Setting, Task, TrainSection};
pub use eval::{
    eval_pairs, fewshot_eval, infer_task, supervised_eval, EvalRow, SupervisedResult, TOP1,
};
pub use pipeline::{evaluate_pipeline, run_pipeline, train_pipeline, PipelineSpec, RunRecord};
pub use report::{collect_records, csv_bytes, read_records, report, RESULTS_CSV, RESULTS_JSON};
pub use stages::{run_stage, AccessLog, StageKind, StageLog, StageSpec};
