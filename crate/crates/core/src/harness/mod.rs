//! Experiment orchestration: evaluation reports, configs and pipelines.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{DatasetSource, EvaluationConfig, ExperimentConfig, InterventionConfig, Stage};
pub use pipeline::{
    dataset_fingerprint, load_artifacts, run_pipeline, Artifacts, EtaRow, RunManifest, StageRecord,
};
pub use report::{
    compare_reports, confidence_interval, evaluate, evaluate_episodes, sample_episodes,
    ConfigSnapshot, EpisodeRecord, EvalReport, Provenance, ReportComparison,
};
