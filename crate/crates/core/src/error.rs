use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {message}")]
    InvalidArgument { field: String, message: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("timestep {t} out of range for a {num_steps}-step schedule")]
    TimestepOutOfRange { t: usize, num_steps: usize },

    #[error("unknown condition `{0}`")]
    UnknownCondition(String),

    #[error("layer `{0}` is not targeted")]
    UntargetedLayer(String),

    #[error("layer selector `{0}` matches no layers")]
    EmptySelector(String),

    #[error("rank {rank} exceeds min(d, k) = {limit} for layer `{layer}`")]
    RankTooLarge { layer: String, rank: usize, limit: usize },

    #[error("duplicate slider `{0}` in stack")]
    DuplicateSlider(String),

    #[error("unknown slider `{0}`")]
    UnknownSlider(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("{0} is not finite")]
    NonFinite(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: u64, what: String },

    #[error("embedding has zero norm")]
    ZeroNorm,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint was trained with model config {checkpoint}, current config is {config}")]
    Incompatible { config: String, checkpoint: String },

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::InvalidArgument { field: field.into(), message: message.into() }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { key: key.into(), message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
