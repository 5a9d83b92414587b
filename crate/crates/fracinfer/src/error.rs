use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("circulant embedding has negative eigenvalue {0:e}")]
    Embedding(f64),
    #[error("divergence at step {step}{context}")]
    Divergence { step: usize, context: String },
    #[error("near-singular Malliavin matrix at node {node} (condition number {cond:e})")]
    Singular { node: usize, cond: f64 },
    #[error("unsupported: {0}")]
    Capability(String),
    #[error("unreliable score: observation {index} has W = {w:e} (se {se:e})")]
    UnreliableScore { index: usize, w: f64, se: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Divergence { step, context } => Error::Divergence {
                step,
                context: format!("{context} {ctx}"),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
