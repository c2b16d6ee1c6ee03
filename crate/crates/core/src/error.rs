//! Error types shared across the crate.

use crate::training::TrainHistory;

/// Crate-wide error type. The variants map onto the failure classes the
/// library distinguishes: bad configuration, bad runtime input, API misuse,
/// and numerical pathologies surfaced during training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A spec, shape, or parameter combination that can never be valid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Runtime data that violates an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// The API was called in an unsupported way (wrong key set, block too
    /// long for brute force, unfrozen calibration in eval, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// The encoder collapsed to a constant output; power normalization is
    /// undefined for it.
    #[error("degenerate encoder: {0}")]
    DegenerateEncoder(String),

    /// Training produced a non-finite loss. The message names the epoch,
    /// batch, and RNG streams so the offending batch can be replayed.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    /// Test loss exceeded 10x its initial value for five consecutive epochs.
    /// The history recorded up to the abort is attached.
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        history: Box<TrainHistory>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
