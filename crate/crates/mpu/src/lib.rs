//! One-pass streaming library for tracking pairwise temporal correlations
//! between network flows (and flow groups).
//!
//! The core structure is a multiplexed min-value sketch: a fixed pool of
//! `p x m x s` counters shared by all flows through hashing, so memory is
//! independent of the number of flows. On top of that sit independent-copy
//! ensembles with median combining, an exact brute-force oracle, adapters
//! for group / tuple-type / lagged correlations, and a trace ingestion
//! layer with a seeded synthetic generator.

pub mod adapters;
pub mod bench;
pub mod estimator;
pub mod hashing;
pub mod ingest;
pub mod oracle;
pub mod sketch;

pub use estimator::{MpuEnsemble, Plan, PlanInput};
pub use hashing::{digest_key, HashSeed, PairwiseHash};
pub use oracle::ExactTracker;
pub use sketch::{AgreementRule, EstimateBreakdown, MpuParams, MpuSketch};

use thiserror::Error;

/// Default cap on counter memory for a single allocation request (bytes).
pub const DEFAULT_MEMORY_CAP: u64 = 2 << 30;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("slot {slot} outside epoch [0, {epoch_len})")]
    SlotOutOfRange { slot: u64, epoch_len: u64 },
    #[error("incompatible sketches: {0}")]
    IncompatibleSketch(String),
    #[error("counter memory {needed} bytes exceeds cap {cap} bytes")]
    MemoryCap { needed: u64, cap: u64 },
    #[error("bad sketch format: {0}")]
    Format(String),
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("trace parse failure: {0}")]
    Parse(String),
    #[error("unknown flow {0:?} with strict group mapping")]
    UnmappedFlow(String),
    #[error("line {line}: {source}")]
    At {
        line: u64,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
