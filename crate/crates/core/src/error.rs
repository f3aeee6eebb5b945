use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("curve parameter {0} outside [0, 1]")]
    ParameterOutOfRange(f64),

    #[error("need at least {required} points, got {got}")]
    TooFewPoints { required: usize, got: usize },

    #[error("polygon has an odd vertex count ({0}); expected two sides of equal length")]
    OddVertexCount(usize),

    #[error("non-finite coordinate")]
    NonFinite,

    #[error("degenerate box: width {w}, height {h}")]
    DegenerateBox { w: f64, h: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("expected {expected} prediction branches, got {got}")]
    BranchCountMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at iteration {iteration} (proposal {proposal})")]
    NonFiniteLoss { iteration: usize, proposal: usize },

    #[error("detections reference scene {scene}, but only {n_scenes} scenes exist")]
    UnknownScene { scene: usize, n_scenes: usize },

    #[error("line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
