//! Training loop, evaluation, ablations and gradient checks.

mod ablation;
mod checkpoint;
mod eval;
mod gradcheck;
mod metrics;
mod run;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::optim::OptimError;

pub use ablation::{ablation_rows, run_ablation, write_summary, AblationAxis, AblationRow, AblationSpec, RowStatus};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILE, CONFIG_FILE};
pub use eval::{evaluate, EvalResult};
pub use gradcheck::{gradcheck, gradcheck_records, gradcheck_with_step, BlockCheck, BlockStatus, GradcheckReport, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use metrics::{MetricsRecord, RecordKind, StepTiming};
pub use run::{batch_gradients, seed_sweep, train, SeedSweep, TrainOutcome, METRICS_FILE, TIMINGS_FILE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("non-finite {what} at step {step} (group {group:?}, lr {lr:e})")]
    NonFinite { what: &'static str, step: usize, group: Option<usize>, lr: f64 },
    #[error("dataset does not match the configuration: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests;
