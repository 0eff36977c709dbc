use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("state out of range: {0}")]
    StateOutOfRange(String),

    #[error("infeasible action: {0}")]
    InfeasibleAction(String),

    #[error("value iteration did not converge after {iterations} iterations (span {span:e})")]
    NonConvergence { iterations: u64, span: f64 },

    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("policy induces {classes} recurrent classes reachable from the initial state")]
    MultichainDetected { classes: usize },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::StateOutOfRange(_) => "state_out_of_range",
            Error::InfeasibleAction(_) => "infeasible_action",
            Error::NonConvergence { .. } => "non_convergence",
            Error::BudgetExceeded(_) => "budget_exceeded",
            Error::MultichainDetected { .. } => "multichain_detected",
            Error::SingularSystem(_) => "singular_system",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
