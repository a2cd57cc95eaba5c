use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot/eigenvalue {value:e} at index {index})")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("eigen-solver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    ConvergenceFailure { sweeps: usize, residual: f64 },

    /// The two leading eigenvalues coincide. The vector is still returned so
    /// the caller can decide whether to use it.
    #[error("top eigenvalues are degenerate ({top:e} vs {second:e})")]
    DegenerateSpectrum {
        top: f64,
        second: f64,
        vector: Vec<f64>,
    },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tape does not match parameters or gradient: {0}")]
    TapeMismatch(String),

    #[error("non-finite gradient entry in {0}")]
    NonFiniteGradient(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("empty feature block")]
    EmptyBlock,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no device holds any sample")]
    AllEmpty,

    #[error("class {class}: device count {local} exceeds fleet total {total}")]
    CountMismatch {
        class: usize,
        local: usize,
        total: usize,
    },

    #[error("orthogonality index needs at least two populated classes, found {0}")]
    TooFewClasses(usize),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
