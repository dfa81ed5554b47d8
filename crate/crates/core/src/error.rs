//! Engine error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} row {row}: {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },

    #[error("duplicate firm id {0:?}")]
    DuplicateFirm(String),

    #[error("unknown market code {code:?} for firm {firm:?}")]
    UnknownMarket { firm: String, code: String },

    #[error("unknown firm id {firm:?} referenced by {path}")]
    UnknownFirm { firm: String, path: String },

    #[error("duplicate price row for firm {firm:?} on {date}")]
    DuplicatePriceRow { firm: String, date: String },

    #[error("date {date} for firm {firm:?} missing from the {market} calendar")]
    DateNotInCalendar {
        firm: String,
        market: String,
        date: String,
    },

    #[error("embedding dimension mismatch in {path}: expected {expected}, got {actual}")]
    DimensionMismatch {
        path: String,
        expected: usize,
        actual: usize,
    },

    #[error("whitening needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),

    #[error("requested dimension {requested} outside valid range 1..={max} (n={n}, p={p})")]
    DimensionOutOfRange {
        requested: usize,
        max: usize,
        n: usize,
        p: usize,
    },

    #[error("requested dimension {requested} exceeds effective rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("vector length {actual} does not match model input dimension {expected}")]
    VectorLength { expected: usize, actual: usize },

    #[error("no encoded firms in market {0}")]
    EmptyMarketSide(String),

    #[error("cluster bootstrap needs at least 2 source-firm clusters, got {0}")]
    SingleCluster(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
