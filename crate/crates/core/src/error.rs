use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{name} = {value} is outside {expected}")]
    Domain {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("non-finite value in {0}")]
    NumericInput(&'static str),

    #[error("vector field is singular at t = 0")]
    Singularity,

    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),

    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),

    #[error("invalid step: dt = {dt} from t = {t}")]
    Schedule { t: f32, dt: f32 },

    #[error("latent diverged at step {step} (lambda = {lambda}, max |z| = {max_abs})")]
    Divergence { step: usize, lambda: f32, max_abs: f32 },

    #[error("loss became non-finite at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("setup: {0}")]
    Setup(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// Process exit code for the command-line tool.
    ///
    /// 2 = usage, 3 = I/O (including malformed files), 4 = numeric divergence,
    /// 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Setup(_) => 3,
            Error::Divergence { .. } | Error::NonFiniteLoss { .. } => 4,
            _ => 1,
        }
    }
}

pub(crate) fn ensure_same_shape(context: &'static str, left: &[usize], right: &[usize]) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            context,
            left: left.to_vec(),
            right: right.to_vec(),
        })
    }
}
