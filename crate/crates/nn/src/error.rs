use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter {0} is frozen")]
    Frozen(String),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("malformed checkpoint: {0}")]
    Parse(String),
    #[error("non-finite value: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub fn kind(&self) -> &'static str {
        match self {
            NnError::Shape(_) => "ShapeMismatch",
            NnError::Frozen(_) => "ConfigError",
            NnError::MissingParam(_) => "ParseError",
            NnError::Parse(_) => "ParseError",
            NnError::Numerical(_) => "NumericalError",
            NnError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "FileNotFound",
            NnError::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, NnError>;
