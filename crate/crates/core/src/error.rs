use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("singular coefficient: {0}")]
    SingularCoefficient(String),
    #[error("step size too large: {reason} (try at least {suggested_steps} steps)")]
    StepSize { reason: String, suggested_steps: usize },
    #[error("inadmissible strategy: {0}")]
    Admissibility(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("fixed point did not converge at time index {time_index}, node {node} (residual {residual:e})")]
    Convergence { time_index: usize, node: usize, residual: f64 },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// True for numerical-convergence failures, including those wrapped by a cascade stage.
    pub fn is_convergence(&self) -> bool {
        match self {
            Error::Convergence { .. } => true,
            Error::Stage { source, .. } => source.is_convergence(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape { expected, actual })
    }
}
