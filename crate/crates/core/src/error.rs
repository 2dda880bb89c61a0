use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("no connected graph found after {attempts} attempts (edge probability {p_edge} too small?)")]
    Disconnected { attempts: u32, p_edge: f64 },

    #[error("invalid mixing matrix: {0}")]
    InvalidMixing(String),

    #[error("invalid compressor: {0}")]
    InvalidCompressor(String),

    #[error("non-finite input to compressor at index {index}")]
    NonFiniteInput { index: usize },

    #[error("compressor fails the general contraction condition (empirical delta = {delta})")]
    NotContractive { delta: f64 },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("iterates diverged at iteration {k} (non-finite entry in {variable})")]
    Divergence { k: u64, variable: &'static str },

    #[error("epsilon vector violates `{constraint}`")]
    EpsilonConstraint { constraint: &'static str },

    #[error("transition matrix entry ({row}, {col}) is negative ({value:e})")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
