use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed npy header: {0}")]
    MalformedHeader(String),

    #[error(
        "unsupported layout: fortran_order arrays are not accepted, transpose to C order first"
    )]
    UnsupportedLayout,

    #[error("unsupported dtype {0:?} (expected '<f4' or '<f8')")]
    UnsupportedDtype(String),

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape {shape:?} holds {expected} elements but {found} values were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("expected a {expected}-D tensor for {what}, got shape {shape:?}")]
    Rank {
        what: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("zero-norm vector ({what}) cannot be L2-normalized")]
    ZeroNorm { what: String },

    #[error("kernel {kernel:?} does not fit input extents {input:?}")]
    KernelTooLarge {
        kernel: [usize; 3],
        input: [usize; 3],
    },

    #[error("window at output cell {cell:?} has zero score mass")]
    ZeroMassWindow { cell: [usize; 3] },

    #[error("negative score {value} at flat index {index}")]
    NegativeScore { index: usize, value: f64 },

    #[error("mode {0} has no gradient")]
    NotDifferentiable(&'static str),

    #[error("target position {index} maps to source coordinate {coord} outside [0, {max}]")]
    IndexOutOfRange {
        index: usize,
        coord: f64,
        max: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        }
    }
}
