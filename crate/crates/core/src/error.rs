use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    /// A row-level problem that aborts the whole load. `row` is the 1-based
    /// data row (the header is row 0).
    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("escrow violation: {0}")]
    Escrow(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("binning error: {0}")]
    Binning(String),

    #[error("support error: {0}")]
    Support(String),

    #[error("design not ready: {0}")]
    DesignNotReady(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Validation { .. } => "validation",
            Error::InvalidData(_) => "invalid-data",
            Error::Escrow(_) => "escrow-violation",
            Error::Provenance(_) => "provenance",
            Error::Binning(_) => "binning",
            Error::Support(_) => "support",
            Error::DesignNotReady(_) => "design-not-ready",
            Error::Singular(_) => "singular",
            Error::Evaluation(_) => "evaluation",
            Error::EmptySelection(_) => "empty-selection",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
