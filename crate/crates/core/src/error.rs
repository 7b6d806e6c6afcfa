use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An expectation state left the feasible region of its model.
    #[error("infeasible state: component {component} ({what}) = {value}")]
    Feasibility {
        component: usize,
        what: &'static str,
        value: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure at step {step}: {what}")]
    Numeric { step: u64, what: String },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("refused: {0}")]
    Refused(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("model format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(step: u64, what: impl Into<String>) -> Self {
        Error::Numeric {
            step,
            what: what.into(),
        }
    }
}
