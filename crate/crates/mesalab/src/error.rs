use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("non-finite value at construction ({rows}x{cols}, index {index})")]
    NonFinite { rows: usize, cols: usize, index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("mesa regularizer must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("degenerate reverse downdate at step {step}: |k'Rk - 1| = {gap:e}")]
    DegenerateReverse { step: usize, gap: f64 },
    #[error("singular linear system: {0}")]
    SingularSystem(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step} (loss {loss})")]
    DivergedTraining { step: usize, loss: f64 },
    #[error("model is not a pure linear-attention stack: {0}")]
    NotLinearStack(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint does not match architecture: {0}")]
    CheckpointMismatch(String),
    #[error("variant `{0}` needs tuned prompt tokens")]
    MissingPromptTokens(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
