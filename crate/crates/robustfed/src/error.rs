//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by vector arithmetic, aggregation, training and the
/// simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty parameter vector")]
    EmptyVector,

    #[error("zero-norm vector (index {index}): cosine distance and norm clipping are undefined for degenerate updates")]
    ZeroNorm { index: usize },

    #[error("layer partition sums to {partition_sum} but vector dimension is {dim}")]
    PartitionMismatch { partition_sum: usize, dim: usize },

    #[error("block index {index} out of range for partition with {blocks} blocks")]
    BlockOutOfRange { index: usize, blocks: usize },

    #[error("empty update set")]
    EmptyUpdateSet,

    #[error("insufficient clients for Krum neighborhood: n = {n} but f = {f} requires n >= f + 3")]
    InsufficientClients { n: usize, f: usize },

    #[error("Bulyan selection size m = {m} exceeds the number of updates n = {n}")]
    SelectionTooLarge { m: usize, n: usize },

    #[error("invalid aggregator spec: {0}")]
    InvalidSpec(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("cannot split {examples} examples across {clients} clients")]
    TooManyClients { examples: usize, clients: usize },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("aggregation failed in round {round}: {source}")]
    RoundFailed {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty metrics: cannot summarize a run with no recorded rounds")]
    EmptyMetrics,

    #[error("degenerate estimate: {0}")]
    DegenerateEstimate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
