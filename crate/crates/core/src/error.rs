use thiserror::Error;

/// Errors produced by the map pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({x}, {y}) lies outside the BEV range")]
    OutOfRange { x: f64, y: f64 },

    #[error("cell ({row}, {col}) is outside a {h}x{w} grid")]
    IndexOutOfBounds {
        row: usize,
        col: usize,
        h: usize,
        w: usize,
    },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("prior set is empty")]
    EmptyPriors,

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
