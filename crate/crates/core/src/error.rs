use autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("sequence of length {len} exceeds the limit of {max} tokens")]
    Length { len: usize, max: usize },
    #[error("pipeline order error: {0}")]
    Pipeline(String),
    #[error("adapter state error: {0}")]
    State(String),
    #[error("request error: {0}")]
    Request(String),
    #[error("non-finite {what} for sample `{sample_id}`")]
    Numeric { sample_id: String, what: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
