use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("budget error: {0}")]
    Budget(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Nn(#[from] cilcomp_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code for command-line front ends: 2 for configuration
    /// problems, 3 for failures while a stage was running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}
