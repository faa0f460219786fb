use alloc::string::String;

/// Errors produced by the recovery core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("solver diverged at step {step}")]
    Diverged { step: usize },

    #[error("ground truth diverged at t = {time}")]
    GenerationDiverged { time: f64 },

    #[error("tape does not match the supplied model")]
    TapeMismatch,

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    TrainingAborted { epoch: usize, batch: usize, reason: String },

    #[error("non-finite objective at {0}")]
    NonFinite(f64),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
