use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("{what} = {dim} is not divisible by n = {n}")]
    NotDivisible { what: String, dim: usize, n: usize },

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("svd did not converge after {sweeps} sweeps")]
    SvdNotConverged { sweeps: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: bad magic {0:?}, expected \"MELR\"")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("checkpoint: unexpected end of file")]
    UnexpectedEof,

    #[error("checkpoint: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    /// True for errors that come from reading or writing files.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::BadMagic(_)
                | Error::UnsupportedVersion(_)
                | Error::UnexpectedEof
                | Error::Format(_)
                | Error::Io(_)
                | Error::Csv(_)
        )
    }
}
