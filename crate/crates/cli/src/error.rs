use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl From<samattr::Error> for CliError {
    fn from(e: samattr::Error) -> Self {
        use samattr::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_) => CliError::Config(msg),
            E::InvalidInput(_) | E::Domain(_) | E::Refused(_) => CliError::Data(msg),
            E::Divergence { .. } | E::NeumannDivergence { .. } | E::SingularPerturbation => {
                CliError::Numerical(msg)
            }
            E::Format(_) | E::Io(_) => CliError::Io(msg),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
