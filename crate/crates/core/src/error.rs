use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input too short: {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },

    #[error("non-finite value at `{0}`")]
    NonFinite(String),

    #[error("zero-norm row {row} in {what}")]
    ZeroNorm { what: &'static str, row: usize },

    #[error("noise level {level} at frame {frame} outside [0, {max}]")]
    LevelOutOfRange { frame: usize, level: usize, max: usize },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
