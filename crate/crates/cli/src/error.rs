use std::path::PathBuf;

use lgm_core::audit::AuditError;
use lgm_core::mechanism::MechanismError;
use lgm_core::ne::NeError;
use lgm_core::scenario::ScenarioError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("profile {path}: {message}")]
    ProfileParse { path: PathBuf, message: String },
    #[error("profile does not fit the scenario: {0}")]
    Profile(#[from] MechanismError),
    #[error(transparent)]
    Equilibrium(#[from] NeError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("centralized solve failed: {0}")]
    Solve(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

/// Machine-readable form printed on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
}

impl CliError {
    pub fn report(&self) -> ErrorReport {
        let mut r = ErrorReport { kind: self.kind(), message: self.to_string(), field: None, line: None, column: None };
        if let CliError::Scenario(ScenarioError::Parse { field, line, column, .. }) = self {
            r.field = Some(field.clone());
            r.line = Some(*line);
            r.column = Some(*column);
        }
        r
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Scenario(ScenarioError::Io { .. }) | CliError::Write { .. } => "io",
            CliError::Scenario(ScenarioError::Parse { .. }) | CliError::ProfileParse { .. } => "parse",
            CliError::Scenario(ScenarioError::Validation(_)) | CliError::Profile(_) | CliError::Audit(_) => {
                "validation"
            }
            CliError::Equilibrium(_) => "equilibrium",
            CliError::Solve(_) => "solve",
            CliError::Usage(_) => "usage",
        }
    }
}
