use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("atom count mismatch: header declares {declared}, found {found}")]
    CountMismatch { declared: usize, found: usize },

    #[error("unsupported element `{0}`")]
    UnknownElement(String),

    #[error("formal charge {0} outside supported range")]
    UnsupportedCharge(i8),

    #[error("bond {bond} references atom {atom} but the molecule has {count} atoms")]
    AtomOutOfRange {
        bond: usize,
        atom: usize,
        count: usize,
    },

    #[error("molecular graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("invalid molecular graph: {0}")]
    InvalidGraph(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("missing internal coordinate {0}")]
    MissingCoordinate(String),

    #[error("placement angle {angle} for atom {atom} is outside (0, pi)")]
    PlacementAngle { atom: usize, angle: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that stem from numerics (degenerate geometry, NaNs)
    /// rather than malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_) | Error::NonFinite(_) | Error::PlacementAngle { .. }
        )
    }
}
