use thiserror::Error;

use crate::solver::SolveReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("capacity exceeded: {what} = {requested} exceeds budget {budget}")]
    Capacity {
        what: &'static str,
        requested: u128,
        budget: u128,
    },

    /// A gradient or type lies outside the region where the problem is posed.
    #[error("domain error: {0}")]
    Domain(String),

    /// The cost (or another model function) is undefined at the requested point.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("start point is not strictly feasible: row {row} has slack {slack:e}")]
    InfeasibleStart { row: usize, slack: f64 },

    #[error("no strictly feasible point: {0}")]
    Infeasible(String),

    #[error("line search failed at barrier stage {}, iteration {}", .report.barrier_stages, .report.newton_iterations)]
    LineSearch { report: Box<SolveReport> },

    #[error("solver did not reach tolerance: kkt residual {:e} after {} newton iterations", .report.kkt_residual, .report.newton_iterations)]
    NotConverged { report: Box<SolveReport> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable name for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Capacity { .. } => "capacity",
            Error::Domain(_) => "domain",
            Error::Evaluation(_) => "evaluation",
            Error::UnknownProblem(_) => "unknown_problem",
            Error::InfeasibleStart { .. } => "infeasible_start",
            Error::Infeasible(_) => "infeasible",
            Error::LineSearch { .. } => "line_search",
            Error::NotConverged { .. } => "not_converged",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Config(_) => "config",
        }
    }
}
