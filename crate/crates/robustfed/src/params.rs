//! Parameter vectors, layer partitions and the two distance metrics used by
//! every aggregation operator.
//!
//! All arithmetic is double precision with plain left-to-right accumulation
//! over a fixed index order, so identical inputs always produce bit-identical
//! results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat, finite vector of model parameters or an update delta.
///
/// Entries are validated on construction: every value must be finite and the
/// vector must be non-empty. Length is immutable afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Build a vector, rejecting NaN/Inf entries and the empty vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        for (index, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(Self { values })
    }

    /// All-zero vector of dimension `d`.
    pub fn zeros(d: usize) -> Result<Self> {
        Self::new(vec![0.0; d])
    }

    /// Dimension `d` of the vector.
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Euclidean norm, accumulated left to right.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.values {
            acc += v * v;
        }
        acc.sqrt()
    }

    /// Element-wise sum. Errors on dimension mismatch.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Element-wise difference `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Scalar multiple. The result is validated, so scaling by a factor that
    /// overflows to infinity is reported as an error rather than propagated.
    pub fn scale(&self, factor: f64) -> Result<ParamVector> {
        ParamVector::new(self.values.iter().map(|v| v * factor).collect())
    }

    fn zip_with(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        ParamVector::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Ordered block sizes `m_1..m_k` partitioning a parameter dimension.
///
/// The partition stores only the block sizes; whether they sum to the
/// dimension of a given vector is checked at the use site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPartition {
    block_sizes: Vec<usize>,
}

impl LayerPartition {
    /// Build a partition. Every block size must be positive and there must be
    /// at least one block.
    pub fn new(block_sizes: Vec<usize>) -> Result<Self> {
        if block_sizes.is_empty() {
            return Err(Error::InvalidSpec("a partition needs at least one block".into()));
        }
        if block_sizes.iter().any(|&m| m == 0) {
            return Err(Error::InvalidSpec("partition blocks must be positive".into()));
        }
        Ok(Self { block_sizes })
    }

    /// The trivial single-block partition of dimension `d`.
    pub fn single(d: usize) -> Result<Self> {
        Self::new(vec![d])
    }

    /// Number of blocks `k`.
    pub fn num_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    /// Total dimension covered by the partition.
    pub fn total_dim(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    /// Check that the partition covers a vector of dimension `d`.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        let partition_sum = self.total_dim();
        if partition_sum != d {
            return Err(Error::PartitionMismatch { partition_sum, dim: d });
        }
        Ok(())
    }

    /// Half-open coordinate range of block `j` (zero-based).
    pub fn block_range(&self, j: usize) -> Result<std::ops::Range<usize>> {
        if j >= self.num_blocks() {
            return Err(Error::BlockOutOfRange {
                index: j,
                blocks: self.num_blocks(),
            });
        }
        let start: usize = self.block_sizes[..j].iter().sum();
        Ok(start..start + self.block_sizes[j])
    }
}

/// Distance metric used for pairwise scoring inside the operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Sum of squared coordinate differences.
    SquaredEuclidean,
    /// `1 - cos(angle)`; only defined for nonzero vectors.
    Cosine,
}

impl DistanceMetric {
    /// Distance between `a` and `b` under this metric.
    pub fn distance(&self, a: &ParamVector, b: &ParamVector) -> Result<f64> {
        match self {
            DistanceMetric::SquaredEuclidean => sq_euclidean(a, b),
            DistanceMetric::Cosine => cosine_distance(a, b),
        }
    }
}

/// Squared Euclidean distance between two vectors of equal dimension.
pub fn sq_euclidean(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mut acc = 0.0;
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        let diff = x - y;
        acc += diff * diff;
    }
    Ok(acc)
}

/// Cosine distance `1 - <a,b> / (|a||b|)`, in `[0, 2]`.
///
/// A zero-norm input signals a degenerate update and is rejected; callers
/// must filter or fail rather than fold such updates into a ranking.
pub fn cosine_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let norm_a = a.norm();
    let norm_b = b.norm();
    if norm_a == 0.0 {
        return Err(Error::ZeroNorm { index: 0 });
    }
    if norm_b == 0.0 {
        return Err(Error::ZeroNorm { index: 1 });
    }
    let mut dot = 0.0;
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        dot += x * y;
    }
    Ok(1.0 - dot / (norm_a * norm_b))
}

/// Euclidean norm of `v`.
pub fn norm(v: &ParamVector) -> f64 {
    v.norm()
}

/// Projection of `v` onto block `j` (zero-based) of partition `p`.
///
/// Concatenating `project(v, p, 0..k)` reproduces `v` bit-exactly.
pub fn project(v: &ParamVector, p: &LayerPartition, j: usize) -> Result<ParamVector> {
    p.check_dim(v.dim())?;
    let range = p.block_range(j)?;
    ParamVector::new(v.as_slice()[range].to_vec())
}

/// Concatenate block vectors back into a single vector.
pub fn concat(blocks: &[ParamVector]) -> Result<ParamVector> {
    let mut values = Vec::with_capacity(blocks.iter().map(ParamVector::dim).sum());
    for block in blocks {
        values.extend_from_slice(block.as_slice());
    }
    ParamVector::new(values)
}
