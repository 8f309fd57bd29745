use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate proposal: box has zero width or height")]
    DegenerateProposal,

    #[error("invalid box [{0}, {1}, {2}, {3}]: coordinates must be finite with x1 <= x2 and y1 <= y2")]
    InvalidBox(f64, f64, f64, f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("side {side:?} does not belong to axis {axis:?}")]
    AxisSideMismatch {
        side: crate::bucketing::Side,
        axis: crate::bucketing::Axis,
    },

    #[error("empty prediction")]
    EmptyPrediction,

    #[error("stale forward cache: backward called with an output from different parameters")]
    StaleCache,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { what, expected, got })
    }
}
