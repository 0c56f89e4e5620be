//! Inter-channel diversity measurement and analytic cost models.

pub mod diversity;
pub mod figures;
pub mod flops;
pub mod stats;

use std::fmt;

pub use diversity::{
    instance_diversity, mean_pairwise_channel_cosine, DiversityReport, TokenSource,
    DEFAULT_FILTER_FRACTION,
};
pub use figures::{emit_figures, fig2_csv, fig5_csv, fig6_csv, FigureBundle};
pub use flops::{encoder_flops, pooler_flops, Component, CostReport};
pub use stats::{mean, spearman, std_dev};

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    TooFewChannels(usize),
    ZeroVector { index: usize },
    LengthMismatch { expected: usize, got: usize },
    InvalidFilter(f64),
    AllPositionsFiltered { positions: usize, fraction: f64 },
    ClsUnavailable,
    Io(String),
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewChannels(c) => write!(f, "need at least 2 channel vectors, got {c}"),
            Self::ZeroVector { index } => {
                write!(f, "channel vector {index} has zero norm; cosine similarity is undefined")
            }
            Self::LengthMismatch { expected, got } => {
                write!(f, "vector length {got} does not match {expected}")
            }
            Self::InvalidFilter(x) => write!(f, "filter fraction {x} is outside [0, 1]"),
            Self::AllPositionsFiltered { positions, fraction } => write!(
                f,
                "filter fraction {fraction} removes all {positions} spatial positions"
            ),
            Self::ClsUnavailable => write!(
                f,
                "per-channel cls tokens exist only under independent encoding; use the patch variant"
            ),
            Self::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for AnalysisError {}

impl From<std::io::Error> for AnalysisError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
