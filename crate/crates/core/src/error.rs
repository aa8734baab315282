use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("unreachable waypoint at radius {radius:.3} m (reach is {reach:.3} m)")]
    UnreachableWaypoint { radius: f64, reach: f64 },

    /// A normalization target had (near) zero length. Usually means the
    /// target encoder collapsed or was fed an all-zero input.
    #[error("degenerate target: norm {norm:e} is below {threshold:e}")]
    DegenerateTarget { norm: f64, threshold: f64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
