use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no volumes within {tol} of b={target}")]
    EmptyShell { target: f64, tol: f64 },

    #[error("invalid SH order {0}: must be one of 0, 2, 4, 6, 8")]
    InvalidOrder(usize),

    #[error("direction {index} is not unit-norm (|g| = {norm})")]
    InvalidDirection { index: usize, norm: f64 },

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("underdetermined fit: {measurements} measurements for {unknowns} unknowns")]
    Underdetermined { measurements: usize, unknowns: usize },

    #[error("gap [{start}, {end}) touches the volume boundary (Z = {depth})")]
    BoundaryGap { start: usize, end: usize, depth: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("all paired differences are zero")]
    DegenerateSample,

    #[error("model missing for method {0}")]
    ModelMissing(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }
}
