use thiserror::Error;

/// Failure modes shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("singular system: pivot {index} has magnitude {magnitude:e}")]
    Singular { index: usize, magnitude: f64 },
    #[error("rank deficient: requested {requested} modes but only {available} are available")]
    Rank { requested: usize, available: usize },
    #[error("numerical instability at step {step}: {detail}")]
    Instability { step: usize, detail: String },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("corrupt or unsupported file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
