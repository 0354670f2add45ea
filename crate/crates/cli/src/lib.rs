//! Batch front end: scenario ingestion, command dispatch and report files.

pub mod commands;
pub mod report;
pub mod scenario;

use riskshare::capital::CapitalError;
use riskshare::catalog::CatalogError;
use riskshare::comonotone::ComonotoneError;
use riskshare::diagnostics::DiagnosticsError;
use riskshare::sharing::SharingError;
use thiserror::Error;

pub use commands::{run, Command, Outcome, RunOptions};
pub use scenario::{load, parse_scenario, Scenario, ScenarioFile};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid `{field}`: {invariant}")]
    Validation { field: String, invariant: String },
    #[error("cannot serialize scenario: {0}")]
    Serialize(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Capital(#[from] CapitalError),
    #[error(transparent)]
    Comonotone(#[from] ComonotoneError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}
