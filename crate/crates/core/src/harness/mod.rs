//! Metrics, experiment orchestration and the command-line interface.

pub mod cli;
mod config;
mod experiment;
mod metrics;

pub use config::{CorpusPaths, CpcRunConfig, EvalConfig, RunConfig, VgclRunConfig};
pub use experiment::{build_grounder, load_splits, pretrain, run_experiment, ExperimentOutput, Pretrained, PretrainLog, Splits, Variant};
pub use metrics::{
    evaluate, iou, long_format, median, random_span_expected_miou, random_span_report, read_metrics, write_metrics, EvalReport, LongRow, MetricsRow,
    DEFAULT_THRESHOLDS,
};
