use thiserror::Error;

use crate::data::GroupKey;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("load error, row {row}, column {column}: {message}")]
    Load { row: usize, column: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("counterfactual cell has no observations: {0}")]
    CounterfactualCell(GroupKey),

    #[error("group cell {0} is empty")]
    EmptyCell(GroupKey),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("singular design, collinear columns: {}", columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("degenerate labels: only one class present")]
    DegenerateLabels,

    #[error("probit did not converge after {iterations} iterations (max |score| {max_score:.3e})")]
    NonConvergence { iterations: usize, max_score: f64, last_iterate: Vec<f64> },

    #[error("support violation for {} unit(s): {}", units.len(), preview(units))]
    Support { units: Vec<String> },

    #[error("mediator overlap failure: {0}")]
    MediatorOverlap(String),

    #[error("missing mediator record for unit {0}")]
    MissingMediator(String),

    #[error("tilting failed after {iterations} iterations (max |residual| {max_residual:.3e})")]
    TiltingFailure { iterations: usize, max_residual: f64, residuals: Vec<f64> },

    #[error("efficient moments undefined: all-zero denominator")]
    ZeroDenominator,

    #[error("inference degraded: {dropped} of {total} bootstrap replicates failed")]
    InferenceDegraded { dropped: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn preview(units: &[String]) -> String {
    const SHOW: usize = 8;
    if units.len() <= SHOW {
        units.join(", ")
    } else {
        format!("{}, ... (+{} more)", units[..SHOW].join(", "), units.len() - SHOW)
    }
}

impl Error {
    /// Stable machine-readable category, used by the CLI for exit codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Load { .. } | Error::Schema(_) | Error::MissingMediator(_) => "data",
            Error::InvalidInput(_) | Error::DimensionMismatch { .. } => "input",
            Error::CounterfactualCell(_) | Error::EmptyCell(_) => "data",
            Error::SingularDesign { .. }
            | Error::DegenerateLabels
            | Error::NonConvergence { .. }
            | Error::TiltingFailure { .. }
            | Error::ZeroDenominator => "estimation",
            Error::Support { .. } | Error::MediatorOverlap(_) => "support",
            Error::InferenceDegraded { .. } => "inference",
            Error::Config(_) => "config",
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => "io",
        }
    }
}
