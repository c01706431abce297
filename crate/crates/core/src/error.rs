use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, EconError>;

#[derive(Debug, Error)]
pub enum EconError {
    #[error("scenario failed validation: {0}")]
    Validation(ValidationReport),

    #[error("marginal productivity of input {input} is zero or non-finite at this point")]
    NonFiniteMarginal { input: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Iteration budget exhausted. `best` is the best iterate found and
    /// `residuals` the residual vector at that iterate.
    #[error("no convergence after {iterations} iterations (max residual {max_residual:e})")]
    NoConvergence { iterations: usize, max_residual: f64, residuals: Vec<f64>, best: Vec<f64> },

    #[error("non-finite evaluation: {0}")]
    NonFiniteEvaluation(String),

    /// A single-period horizon cannot realize energy income from production;
    /// the zero-production plan is attached.
    #[error("horizon of one period leaves no future period for energy income")]
    DegenerateHorizon { plan: Box<crate::energy_sector::SurplusPlan> },

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("no single over-assignment in [0,1) reconciles period {period}; implied values {implied:?}")]
    InconsistentAssignments { period: usize, implied: Vec<f64> },

    #[error("period {period} has no energy surplus for positive requested output")]
    InsufficientSurplus { period: usize },

    #[error("grid oracle found no feasible point")]
    NoFeasibleGridPoint,

    #[error("no build energy recorded for prime mover '{prime_mover}'")]
    MissingHistory { prime_mover: String },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("synthetic energy transfer is undefined for fiat money")]
    FiatMoney,

    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse failure: {0}")]
    Parse(#[from] serde_json::Error),
}
