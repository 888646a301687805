//! Request traces: CSV ingestion/export and synthetic diurnal generation.

mod stats;
mod synthetic;
mod trace;

pub use stats::{minute_counts, periodicity_score, StatsError};
pub use synthetic::{
    generate_synthetic, ScheduledBurst, StreamSpec, SyntheticPlan, SyntheticWorkloadSpec, TokenDist,
};
pub use trace::{export_trace, ingest_trace, read_trace, IngestReport, TraceRecord, TRACE_HEADER};

use thiserror::Error;

use crate::config::ConfigError;
use crate::types::DomainError;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}
