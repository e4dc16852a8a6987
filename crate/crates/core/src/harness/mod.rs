//! Experiment orchestration: config, the sweep → free energy → transfer
//! pipeline, correlation reports and plot data.

mod config;
mod pipeline;
mod report;

pub use config::{DataConfig, EvalScope, EvaluationConfig, ExperimentConfig, SweepConfig, TaskConfig};
pub use pipeline::{rows_csv, run_experiment, with_workers, CellEntry, CellSelector, CellStatus, Row, RunManifest, RunSummary, MANIFEST_VERSION, ROWS_HEADER};
pub use report::{
    correlate, correlation_reports, emit_plot_data, pearson, scatter_svg, write_correlations, Band, CorrelationReport, ACCURACY_HEADER,
    CORRELATIONS_HEADER, SCATTER_HEADER, TRAIN_LOSS_HEADER, WBIC_HEADER,
};
