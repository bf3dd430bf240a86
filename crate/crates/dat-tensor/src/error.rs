use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not satisfy an operation's contract.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter value is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation requires a different element precision.
    #[error("precision error: {0}")]
    Precision(String),

    /// A value became NaN or infinite where the contract requires finite data.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
