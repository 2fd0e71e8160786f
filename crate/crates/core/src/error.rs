use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(
        "Neumann iteration diverged at iteration {iteration}; try a smaller scale alpha or a larger damping term"
    )]
    NeumannDivergence { iteration: usize },

    #[error("perturbation is singular: the full training gradient vanishes at these parameters")]
    SingularPerturbation,

    #[error("trajectory format error: {0}")]
    Format(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
