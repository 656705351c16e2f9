use std::io;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] aem_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
