use thiserror::Error;

/// Errors raised by tensors, problems and the engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numerical error{}: {message}", problem.as_ref().map(|p| format!(" in problem `{p}`")).unwrap_or_default())]
    Numerical {
        problem: Option<String>,
        message: String,
    },

    #[error("dependency cycle among lower-to-upper edges: {}", .0.join(" -> "))]
    GraphCycle(Vec<String>),

    #[error("hierarchy violation: {0}")]
    Hierarchy(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("internal consistency error: {0}")]
    InternalConsistency(String),

    #[error("problem `{problem}` failed: {source}")]
    Step {
        problem: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical {
            problem: None,
            message: msg.into(),
        }
    }

    /// Attach problem provenance unless the error already carries it.
    pub fn in_problem(self, name: &str) -> Self {
        match self {
            Error::Step { .. } => self,
            Error::Numerical {
                problem: None,
                message,
            } => Error::Step {
                problem: name.to_string(),
                source: Box::new(Error::Numerical {
                    problem: Some(name.to_string()),
                    message,
                }),
            },
            other => Error::Step {
                problem: name.to_string(),
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, stripping problem provenance.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }
}
