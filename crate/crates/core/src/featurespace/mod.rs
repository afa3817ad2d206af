//! Log-record schema, encoding and dataset handling.
//!
//! A shopping log is a TSV file of click events; each line carries the ids,
//! dense statistics and behavior sequence the model consumes, plus the
//! click/purchase labels. A sidecar schema file pins vocabulary sizes and
//! dense widths so every consumer of a dataset agrees on the encoding.

mod dataset;
mod embed;
mod record;
mod schema;

pub use dataset::Dataset;
pub use embed::{embed_batch, DenseStats, EmbeddedBatch, EmbedTableIds};
pub use record::{encode_record, EncodedSample, SeqEvent};
pub use schema::FeatureSchema;

use thiserror::Error;

/// Promotion-relative shopping occasion of a day.
///
/// `DP` marks promotion days themselves; `BP`/`AP` the windows just before
/// and after; `NP` everything else. Order here is the canonical order used
/// for per-occasion arrays, score vectors and report columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OccasionTag {
    /// Days leading up to a promotion.
    BP,
    /// Promotion days.
    DP,
    /// Days right after a promotion.
    AP,
    /// Ordinary days.
    NP,
}

impl OccasionTag {
    pub const ALL: [OccasionTag; 4] = [
        OccasionTag::BP,
        OccasionTag::DP,
        OccasionTag::AP,
        OccasionTag::NP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OccasionTag::BP => "BP",
            OccasionTag::DP => "DP",
            OccasionTag::AP => "AP",
            OccasionTag::NP => "NP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "BP" => Some(OccasionTag::BP),
            "DP" => Some(OccasionTag::DP),
            "AP" => Some(OccasionTag::AP),
            "NP" => Some(OccasionTag::NP),
            _ => None,
        }
    }

    /// Index into the canonical `[BP, DP, AP, NP]` order.
    pub fn idx(self) -> usize {
        match self {
            OccasionTag::BP => 0,
            OccasionTag::DP => 1,
            OccasionTag::AP => 2,
            OccasionTag::NP => 3,
        }
    }
}

impl std::fmt::Display for OccasionTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Failures while reading schemas or log records. Record errors name the
/// offending line (1-based) and field so bad data is findable.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected {want} tab-separated fields, found {got}")]
    FieldCount { line: usize, want: usize, got: usize },
    #[error("line {line}: field `{field}`: cannot parse {value:?}")]
    BadField {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: field `{field}`: expected {want} comma-separated values, found {got}")]
    DenseWidth {
        line: usize,
        field: &'static str,
        want: usize,
        got: usize,
    },
    #[error("line {line}: purchase=1 requires click=1")]
    PurchaseWithoutClick { line: usize },
    #[error("schema file {path}: {why}")]
    BadSchema { path: String, why: String },
}
