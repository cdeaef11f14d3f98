use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible occupancy budget: {0}")]
    InfeasibleBudget(String),

    /// A configuration file or policy/config combination that cannot be run.
    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("value iteration did not converge within {max_iter} iterations (last change {last_change:e})")]
    IterationLimit { max_iter: usize, last_change: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }

    /// True for errors caused by user input rather than by a failed run.
    pub fn is_configuration(&self) -> bool {
        matches!(self, Error::Configuration(_))
    }
}
