//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset handling, model training, selection and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad layer sizes, budgets, fractions, enums...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor/matrix dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN/Inf encountered where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// CSV/file ingestion failure, with row context where available.
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// Selection asked for more points than the remaining pool allows.
    #[error("budget error: {0}")]
    Budget(String),

    /// Labeling-protocol violation (relabeling, budget overrun).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A metric is undefined on the given frame (e.g. AUROC without both
    /// correct and incorrect points).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// The evaluation frame cannot support any metric (e.g. every point
    /// was selected for labeling).
    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    /// Checkpoint ensemble queried before any checkpoint was recorded.
    #[error("empty ensemble: prediction requires at least one checkpoint")]
    EmptyEnsemble,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable kind tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Ingest(_) => "ingest",
            Error::Budget(_) => "budget",
            Error::Protocol(_) => "protocol",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::DegenerateFrame(_) => "degenerate_frame",
            Error::EmptyEnsemble => "empty_ensemble",
            Error::Io(_) => "io",
            Error::Serialize(_) => "serialize",
        }
    }
}
