use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("parameter `{0}` not found")]
    UnknownParam(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {0} outside the allowed range")]
    TimeOutOfRange(f64),

    #[error("transition density undefined: noise std is zero")]
    ZeroStd,

    #[error("non-finite latent at sampling step {step}")]
    DivergedSampling { step: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("rollout key {found:?} does not match bank key {expected:?}")]
    KeyMismatch {
        expected: crate::bank::BankKey,
        found: crate::bank::BankKey,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
