use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("invalid rotation matrix: {0}")]
    InvalidRotationMatrix(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid hand type: {0}")]
    InvalidHandType(String),
    #[error("joint angle {angle} outside limits [{min}, {max}]")]
    JointLimitViolation { angle: f64, min: f64, max: f64 },
    #[error("empty geometry: {0}")]
    EmptyGeometry(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least {needed} frames, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// Stable variant name, used for operator-facing error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::DegenerateRotation(_) => "DegenerateRotation",
            CoreError::InvalidRotationMatrix(_) => "InvalidRotationMatrix",
            CoreError::InvalidSequence(_) => "InvalidSequence",
            CoreError::InvalidHandType(_) => "InvalidHandType",
            CoreError::JointLimitViolation { .. } => "JointLimitViolation",
            CoreError::EmptyGeometry(_) => "EmptyGeometry",
            CoreError::InvalidGeometry(_) => "InvalidGeometry",
            CoreError::ShapeMismatch(_) => "ShapeMismatch",
            CoreError::InsufficientFrames { .. } => "InsufficientFrames",
            CoreError::InsufficientSamples { .. } => "InsufficientSamples",
            CoreError::InvalidInput(_) => "InvalidInput",
            CoreError::Parse(_) => "ParseError",
            CoreError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "FileNotFound",
            CoreError::Io(_) => "IoError",
        }
    }
}
