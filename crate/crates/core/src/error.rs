use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("cannot place {k} uniform steps in [1, {t_max}]")]
    InvalidGrid { k: usize, t_max: usize },

    #[error("uniform grid of {k} steps over {t_max} collides after rounding")]
    GridCollision { k: usize, t_max: usize },

    #[error("shape mismatch: expected {expected:?} (frames, dims), found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("non-finite value in frame tensor")]
    NonFinite,

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("covariance is not positive definite")]
    SingularCovariance,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
