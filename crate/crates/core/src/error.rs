use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("graph is not connected after {attempts} attempt(s)")]
    Disconnected { attempts: usize },

    #[error("weight matrix is not doubly stochastic: {axis} {index} sums to {sum}")]
    NotDoublyStochastic {
        axis: &'static str,
        index: usize,
        sum: f64,
    },

    #[error("weight matrix has nonzero entry ({row}, {col}) outside the graph support")]
    WeightSupport { row: usize, col: usize },

    #[error("second eigenvalue modulus {lambda2} is not below 1; consensus does not contract")]
    NoSpectralGap { lambda2: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("reward {reward} exceeds bound r_max = {r_max}")]
    RewardBound { reward: f64, r_max: f64 },

    #[error("simulator invariant violated at slot {slot}: {reason}")]
    Invariant { slot: usize, reason: String },

    #[error("run {run} (seed {seed}) aborted: {source}")]
    RunAborted {
        run: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
