use bihoi_core::CoreError;
use bihoi_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid length: {0}")]
    InvalidLength(String),
    #[error("timestep {t} outside 1..={max}")]
    InvalidTimestep { t: usize, max: usize },
    #[error("non-finite value at step {step}: {what}")]
    Numerical { step: usize, what: String },
    #[error("assembly failed: {0}")]
    Assembly(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl ModelError {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelError::Core(e) => e.kind(),
            ModelError::Nn(e) => e.kind(),
            ModelError::InvalidConfig(_) => "InvalidConfig",
            ModelError::InvalidLength(_) => "InvalidLength",
            ModelError::InvalidTimestep { .. } => "InvalidTimestep",
            ModelError::Numerical { .. } => "NumericalError",
            ModelError::Assembly(_) => "AssemblyError",
            ModelError::Config(_) => "ConfigError",
            ModelError::ShapeMismatch(_) => "ShapeMismatch",
            ModelError::InvalidInput(_) => "InvalidInput",
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::InvalidInput(format!("{what} contains NaN or infinity")))
    }
}
