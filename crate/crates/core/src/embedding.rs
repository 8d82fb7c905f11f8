//! Vector math shared by every stage: cosine similarity, L2 normalization
//! and scaled softmax.
//!
//! Vectors are stored as `f32` (the on-disk precision) but every reduction
//! accumulates in `f64`.

use thiserror::Error;

/// Default embedding width of the dual encoder outputs.
pub const DEFAULT_DIM: usize = 512;

/// Default inverse temperature applied to cosine similarities before softmax.
pub const DEFAULT_SCALE: f64 = 100.0;

/// Norm below which a vector is treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("empty input")]
    Empty,
    #[error("softmax scale must be positive and finite, got {0}")]
    InvalidScale(f64),
}

/// A fixed-dimension embedding as read from an embedding store.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&x| x as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn normalized(&self) -> Result<Self, VectorError> {
        l2_normalize(&self.0).map(Self)
    }
}

impl From<Vec<f32>> for EmbeddingVector {
    fn from(values: Vec<f32>) -> Self {
        Self(values)
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn norm64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dot(a, b) / (|a| |b|)`, accumulated in `f64`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, VectorError> {
    if a.len() != b.len() {
        return Err(VectorError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = aa.sqrt() * bb.sqrt();
    if aa.sqrt() <= MIN_NORM || bb.sqrt() <= MIN_NORM {
        return Err(VectorError::ZeroNorm);
    }
    Ok((ab / denom).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>, VectorError> {
    let n = norm(v);
    if n <= MIN_NORM {
        return Err(VectorError::ZeroNorm);
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

pub fn l2_normalize64(v: &[f64]) -> Result<Vec<f64>, VectorError> {
    let n = norm64(v);
    if !(n > MIN_NORM) {
        return Err(VectorError::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Softmax of `scale * scores`, shifted by the maximum before exponentiation.
pub fn softmax(scores: &[f64], scale: f64) -> Result<Vec<f64>, VectorError> {
    if scores.is_empty() {
        return Err(VectorError::Empty);
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(VectorError::InvalidScale(scale));
    }
    let max = scores
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (scale * (s - max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
