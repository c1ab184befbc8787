use std::fmt;
use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug)]
pub enum Error {
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A tensor was constructed with a data buffer that does not match its shape.
    DataLength { expected: usize, got: usize },
    /// A single argument is outside the operation's domain.
    InvalidArgument { op: &'static str, reason: String },
    /// Batch statistics cannot be computed from fewer than two values per channel.
    DegenerateBatch { per_channel: usize },
    /// The root of a backward pass must hold exactly one scalar.
    NonScalarRoot { shape: Vec<usize> },
    /// A function or gradient produced NaN or infinity.
    NonFinite { context: String },
    /// Model description rejected before any parameter is allocated.
    InvalidSpec(String),
    /// Spatial size of a model input is not a multiple of 16.
    Indivisible { height: usize, width: usize },
    /// Stored tensors do not line up with the receiving model.
    StateMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    /// A NIfTI file failed validation; `field` names the offending header field.
    Nifti { field: &'static str, reason: String },
    /// A checkpoint file is malformed.
    Checkpoint(String),
    /// Input volumes are missing or inconsistent; `volume` names the culprit.
    Dataset { volume: String, reason: String },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Self::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape volume {expected}")
            }
            Self::InvalidArgument { op, reason } => write!(f, "{op}: {reason}"),
            Self::DegenerateBatch { per_channel } => write!(
                f,
                "batch norm needs at least 2 values per channel in train mode, got {per_channel}"
            ),
            Self::NonScalarRoot { shape } => {
                write!(f, "backward root must be a scalar, got shape {shape:?}")
            }
            Self::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Self::InvalidSpec(reason) => write!(f, "invalid model spec: {reason}"),
            Self::Indivisible { height, width } => write!(
                f,
                "input spatial size {height}x{width} must be divisible by 16 (four 2x2 poolings)"
            ),
            Self::StateMismatch {
                index,
                expected,
                found,
            } => write!(
                f,
                "state mismatch at entry {index}: model expects {expected}, found {found}"
            ),
            Self::Nifti { field, reason } => write!(f, "nifti {field}: {reason}"),
            Self::Checkpoint(reason) => write!(f, "checkpoint: {reason}"),
            Self::Dataset { volume, reason } => write!(f, "volume {volume}: {reason}"),
            Self::Io(err) => write!(f, "io: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Self::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}
