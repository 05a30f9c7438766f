//! Config-driven experiments: dataset collection, encoder training,
//! strategy-by-seed sweeps, evaluation and summary reports.
//!
//! Every command reads an [`ExperimentConfig`] and works inside its output
//! directory:
//!
//! ```text
//! <out>/dataset.jsonl          collect
//! <out>/encoder.json           train-encoder (checkpoint)
//! <out>/encoder_report.json    train-encoder (training + abstraction report)
//! <out>/manifest.jsonl         append-only record of artifacts and runs
//! <out>/curves/<run_id>.csv    simulate
//! <out>/results/<run_id>.json  simulate
//! <out>/evaluation.json        evaluate
//! <out>/summary.csv            evaluate
//! <out>/report.txt             report
//! ```

mod config;
mod presets;
mod report;
mod runner;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    DatasetConfig, EncoderConfig, EncoderSource, EnvConfig, EvaluationConfig, ExperimentConfig,
    LearnerSpec, PolicySpec, SimulationConfig, Strategy,
};
pub use presets::{preset, PRESET_NAMES};
pub use report::{
    cmd_evaluate, cmd_report, load_curves, render_report, Evaluation, StrategySummary,
};
pub use runner::{
    cmd_collect, cmd_simulate, cmd_train_encoder, read_manifest, run_id, ManifestEntry,
    PreparedSweep, RunRecord, SweepSummary,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing input {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Learner(#[from] crate::learners::LearnerError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("serialization: {0}")]
    Serde(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ExperimentError {
    let path = path.into();
    move |source| ExperimentError::Io { path, source }
}
