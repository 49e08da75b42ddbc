use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("{message} (last residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    #[error("agent {agent} of population {population} failed at iteration {iteration}: {source}")]
    Agent {
        iteration: usize,
        population: usize,
        agent: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid graph sequence: {0}")]
    Graph(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// Attach population/agent identity to a solver failure.
    pub(crate) fn in_agent(self, population: usize, agent: usize) -> Self {
        Error::Agent {
            iteration: 0,
            population,
            agent,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_iteration(self, k: usize) -> Self {
        match self {
            Error::Agent {
                population,
                agent,
                source,
                ..
            } => Error::Agent {
                iteration: k,
                population,
                agent,
                source,
            },
            other => other,
        }
    }
}
