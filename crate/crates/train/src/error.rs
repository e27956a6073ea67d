use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid training configuration: {0}")]
    Config(String),

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("checkpoint format error at byte offset {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },

    #[error(transparent)]
    Core(#[from] tnnsim_core::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
