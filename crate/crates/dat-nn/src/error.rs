use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or layer configuration violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] dat_tensor::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact (checkpoint, config file) is malformed.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
