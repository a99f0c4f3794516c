//! Grid search over training hyperparameters, aggregation of the resulting
//! accuracies and comparison tables.

mod report;
mod run;
mod spec;
mod stats;

pub use report::{Mark, ReportRow, ReportTable};
pub use run::{
    read_records, run_grid, setting_train_config, write_records, Executor, GridDataset, RayonExecutor, RunRecord,
    SequentialExecutor,
};
pub use spec::{Axis, GridSpec, MethodAxes, Setting};
pub use stats::{
    aggregate, boxplot_json, quantile, write_aggregates, AggregateStats, GroupBy, GroupStats, QUANTILE_METHOD,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid spec line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("grid spec: {0}")]
    Spec(String),
    #[error("dataset {dataset}: {message}")]
    Dataset { dataset: String, message: String },
    #[error("setting {setting}: {message}")]
    Setting { setting: String, message: String },
    #[error("report shape: {0}")]
    Shape(String),
    #[error("record line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Match(#[from] crate::matcher::MatchError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
