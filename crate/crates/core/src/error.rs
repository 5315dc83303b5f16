use thiserror::Error;

use crate::model::KoopmanModel;
use crate::training::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration failure: non-finite derivative in state {index}")]
    IntegrationFailure { index: usize },

    #[error("simulation diverged at t = {time}: state {index} = {value} outside its bounds")]
    SimulationDiverged { time: f64, index: usize, value: f64 },

    #[error("steady state not found: {0}")]
    SteadyStateFailure(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient history: need {needed} samples, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("degenerate channel `{0}`: zero range in data")]
    DegenerateChannel(String),

    #[error("non-positive value {value} on log-scaled channel `{channel}`")]
    NonPositiveLogChannel { channel: String, value: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rollout diverged at step {step}")]
    RolloutDiverged { step: usize },

    #[error("non-representable dynamics: {0}")]
    NonRepresentable(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("structure mismatch: checkpoint holds `{found}` dynamics, `{requested}` requested")]
    StructureMismatch { found: String, requested: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged {
        epoch: usize,
        reason: String,
        best: Option<Box<(KoopmanModel, TrainReport)>>,
    },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Numerical failures, as opposed to configuration or I/O problems.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IntegrationFailure { .. }
                | Error::SimulationDiverged { .. }
                | Error::SteadyStateFailure(_)
                | Error::RolloutDiverged { .. }
                | Error::NonRepresentable(_)
                | Error::TrainingDiverged { .. }
                | Error::SolverFailure(_)
        )
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Shape(_)
                | Error::InsufficientHistory { .. }
                | Error::EmptyDataset
                | Error::DegenerateChannel(_)
                | Error::NonPositiveLogChannel { .. }
                | Error::StructureMismatch { .. }
        )
    }
}
