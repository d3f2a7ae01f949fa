//! Desk-scale training: synthetic corpora, AdamW, the step loop with
//! baseline / random-LTD / TokenBypass routing, metric logs, and the
//! ablation experiments built on top of them.

mod corpus;
mod experiments;
mod optim;
mod train;

pub use corpus::{make_corpus, Corpus, CorpusKind, CHAR_ALPHABET};
pub use experiments::{
    experiment_compare, experiment_dropout_interplay, experiment_layer_sensitivity, matched_constant, CellSummary,
    CompareCell, CompareReport, DropoutCell, DropoutReport, SensitivityReport,
};
pub use optim::{AdamW, OptimConfig};
pub use train::{
    evaluate, read_metrics_csv, sample_batch, train, train_from, train_on, write_metrics_csv, DataConfig, LrSettings, MetricsRecord,
    Method, RunSettings, TrainConfig, TrainRun,
};

use crate::budget::BudgetError;
use crate::model::ModelError;
use crate::nn::NnError;
use crate::schedule::ScheduleError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at iteration {iter}: {reason}")]
    Diverged { iter: u64, reason: String, records: Vec<MetricsRecord> },
    #[error("no validation data")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    /// True for failures caused by the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, TrainError::Config(_) | TrainError::Schedule(_) | TrainError::Budget(_))
            || matches!(self, TrainError::Model(ModelError::Config(_)))
    }
}
