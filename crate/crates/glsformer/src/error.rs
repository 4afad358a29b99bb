use autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("NaN gradient in parameter {0}")]
    NanGradient(String),
}

impl GlsError {
    pub fn config(msg: impl Into<String>) -> Self {
        GlsError::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GlsError::Io {
            path: path.into(),
            source,
        }
    }
}
