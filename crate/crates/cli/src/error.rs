use thiserror::Error;

/// Failures surfaced by the command line, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical instability: {0}")]
    Instability(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Instability(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<deimlab::Error> for CliError {
    fn from(e: deimlab::Error) -> Self {
        use deimlab::Error as E;
        match e {
            E::Parameter(_) => CliError::Config(e.to_string()),
            E::Input(_) | E::Format(_) | E::Io(_) | E::Shape { .. } | E::Rank { .. } => CliError::Input(e.to_string()),
            E::Instability { .. } | E::Divergence { .. } | E::Singular { .. } => CliError::Instability(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(format!("csv: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
