//! Dense tensors, reverse-mode autodiff and the optimizer used to train
//! poolers and probe heads on precomputed features.

use std::fmt;

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::AdamW;
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    NonFinite {
        op: &'static str,
    },
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    NonScalarRoot {
        shape: Vec<usize>,
    },
    BackwardAlreadyRun,
    InvalidArgument(String),
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, expected, got } => {
                write!(
                    f,
                    "{op}: shape mismatch, expected {expected:?}, got {got:?}"
                )
            }
            Self::NonFinite { op } => write!(f, "{op}: input contains NaN or infinity"),
            Self::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Self::NonScalarRoot { shape } => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
            Self::BackwardAlreadyRun => write!(f, "backward already ran on this tape"),
            Self::InvalidArgument(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for NumericsError {}
