//! Experiment runner: configuration, training runs, the discount sweep,
//! metrics files and comparison reports.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod report;
pub mod selftest;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use metrics::{evaluate, read_metrics, write_metrics, MetricsRow, METRICS_COLUMNS};
pub use report::{render_csv, render_table, report, ReportRow};
pub use train::{
    document_split, gamma_sweep, prepare, run_pretrain, run_training, sweep_with, train_with,
    Setup, SweepRow, TrainOutcome,
};
