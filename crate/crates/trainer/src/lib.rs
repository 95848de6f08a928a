//! Training, evaluation and ablation runs over the synthetic suite, plus the
//! pieces behind the `clorae` command line.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod train;

use std::path::PathBuf;

pub use ablate::{ablate, AblationReport, VariantResult};
pub use config::{Ablation, RunConfig};
pub use eval::{evaluate, routing_cmd, score_predictions, DatasetScore, EvalReport};
pub use metrics::{DatasetEpoch, EpochMetrics};
pub use train::{encode_suite, load_suite, prepare, train, train_prepared, EncodedSplits, Prepared, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] clorae_data::DataError),
    #[error(transparent)]
    Model(#[from] clorae_model::ModelError),
    #[error(transparent)]
    Core(#[from] clorae_core::CoreError),
    #[error("non-finite loss at epoch {epoch}, step {step}; first affected parameter: {param}")]
    NonFinite { epoch: usize, step: usize, param: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) => 2,
            TrainError::Data(_) => 3,
            TrainError::Model(clorae_model::ModelError::Manifest(_)) => 4,
            TrainError::Model(_) | TrainError::Core(_) => 5,
            TrainError::NonFinite { .. } => 6,
            TrainError::Io { .. } => 7,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.into(),
            source,
        }
    }
}
