//! Inter-channel feature similarity within one instance.

use serde::{Deserialize, Serialize};

use super::stats::mean;
use super::AnalysisError;
use crate::encoder::{EncodingMode, FeatureMap};
use crate::scalar::Scalar;

/// Fraction of the most similar spatial positions dropped by default.
pub const DEFAULT_FILTER_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    /// Per-channel cls tokens (independent encoding only).
    Cls,
    /// Tokens sharing a spatial position across channels.
    Patch,
}

impl TokenSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cls => "cls",
            Self::Patch => "patch",
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Average of `cos(v_i, v_j)` over all pairs `i < j`.
pub fn mean_pairwise_channel_cosine(vectors: &[Vec<f64>]) -> Result<f64, AnalysisError> {
    if vectors.len() < 2 {
        return Err(AnalysisError::TooFewChannels(vectors.len()));
    }
    let d = vectors[0].len();
    let mut norms = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(AnalysisError::LengthMismatch {
                expected: d,
                got: v.len(),
            });
        }
        let n = dot(v, v).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(AnalysisError::ZeroVector { index: i });
        }
        norms.push(n);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = dot(&vectors[i], &vectors[j]) / (norms[i] * norms[j]);
            total += c.clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Number of positions kept after dropping `fraction` of `positions`.
pub fn retained_positions(positions: usize, fraction: f64) -> Result<usize, AnalysisError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(AnalysisError::InvalidFilter(fraction));
    }
    let dropped = (fraction * positions as f64 + 1e-9).floor() as usize;
    let kept = positions.saturating_sub(dropped);
    if kept == 0 {
        return Err(AnalysisError::AllPositionsFiltered {
            positions,
            fraction,
        });
    }
    Ok(kept)
}

/// Similarity of one instance's channels.
///
/// The patch variant scores every spatial position by the mean pairwise
/// cosine of the `C` tokens at that position, drops the highest-scoring
/// `filter_fraction` of positions and averages the rest. The cls variant
/// compares per-channel cls tokens and ignores the filter.
pub fn instance_diversity<S: Scalar>(
    features: &FeatureMap<S>,
    source: TokenSource,
    filter_fraction: f64,
) -> Result<f64, AnalysisError> {
    let c = features.channels;
    let d = features.dim;
    match source {
        TokenSource::Cls => {
            if features.mode != EncodingMode::Ife {
                return Err(AnalysisError::ClsUnavailable);
            }
            let rows: Vec<Vec<f64>> = (0..c)
                .map(|i| {
                    features
                        .cls
                        .row_slice(i)
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .collect()
                })
                .collect();
            mean_pairwise_channel_cosine(&rows)
        }
        TokenSource::Patch => {
            let n = features.tokens_per_channel;
            let kept = retained_positions(n, filter_fraction)?;
            let data = features.patch.data();
            let mut scores = Vec::with_capacity(n);
            for pos in 0..n {
                let rows: Vec<Vec<f64>> = (0..c)
                    .map(|ch| {
                        let off = (ch * n + pos) * d;
                        data[off..off + d]
                            .iter()
                            .map(|v| v.to_f64_lossy())
                            .collect()
                    })
                    .collect();
                scores.push(mean_pairwise_channel_cosine(&rows)?);
            }
            scores.sort_by(f64::total_cmp);
            Ok(mean(&scores[..kept]))
        }
    }
}

/// Per-instance similarities for one dataset under one encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub dataset: String,
    pub mode: EncodingMode,
    pub source: TokenSource,
    pub filter_fraction: f64,
    pub similarities: Vec<f64>,
}

impl DiversityReport {
    pub fn compute<S: Scalar>(
        dataset: &str,
        features: &[FeatureMap<S>],
        source: TokenSource,
        filter_fraction: f64,
    ) -> Result<Self, AnalysisError> {
        let mode = features
            .first()
            .map(|f| f.mode)
            .unwrap_or(EncodingMode::Ife);
        let similarities = features
            .iter()
            .map(|f| instance_diversity(f, source, filter_fraction))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            dataset: dataset.to_string(),
            mode,
            source,
            filter_fraction,
            similarities,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.similarities.len()
    }

    pub fn mean_similarity(&self) -> f64 {
        mean(&self.similarities)
    }
}
