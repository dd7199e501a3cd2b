//! Quantization-aware training (QAT) with self-supervised knowledge
//! distillation.
//!
//! The crate is built around a small f64 tensor type with a reverse-mode
//! differentiation tape ([`tensor`], [`tape`]). A unified fake quantizer
//! (clip/normalize, round to one of `2^b` levels, denormalize) plugs into the
//! tape through custom backward rules ([`quant`]), so the straight-through
//! estimator and its discretization-error variants are interchangeable per
//! run. Teachers and low-bit students share architectures ([`model`]),
//! distillation losses live in [`distill`], and [`train`] orchestrates the
//! pretrain/distill/evaluate workflow that the `quantkd` binary drives from
//! JSON configs ([`config`], [`runner`]).

pub mod config;
pub mod data;
pub mod distill;
pub mod model;
pub mod numdiff;
pub mod quant;
pub mod runner;
pub mod tape;
pub mod tensor;
pub mod train;

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Two operands had incompatible shapes; names the op and both shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A precondition on an argument was violated.
    InvalidArgument(String),
    /// Configuration file or override could not be parsed/validated.
    Config(String),
    /// Checkpoint file is malformed.
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
