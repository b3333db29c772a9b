use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dimerge_core::Error),
    #[error("config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("--set {0}: expected dotted.key=value")]
    SetSyntax(String),
    #[error("{field} is not set or does not exist: {path}")]
    MissingPath { field: &'static str, path: String },
    #[error("{field} must differ from output_path ({path})")]
    OutputConflict { field: &'static str, path: PathBuf },
    #[error("output {0} already exists; set overwrite = true to replace it")]
    OutputExists(PathBuf),
    #[error("unsupported schema_version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("{0}")]
    Invalid(String),
    #[error("{context} {path}: {source}")]
    Io {
        context: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.class(),
            CliError::ConfigRead { .. } => "config.read",
            CliError::ConfigParse(_) => "config.parse",
            CliError::SetSyntax(_) => "config.set_syntax",
            CliError::MissingPath { .. } => "config.missing_path",
            CliError::OutputConflict { .. } => "config.output_conflict",
            CliError::OutputExists(_) => "config.output_exists",
            CliError::SchemaVersion { .. } => "config.schema_version",
            CliError::Invalid(_) => "config.invalid",
            CliError::Io { .. } => "io.error",
        }
    }

    pub fn exit_code(&self) -> u8 {
        let class = self.class();
        if class.starts_with("config.") {
            2
        } else if class.starts_with("io.") || class.starts_with("format.") {
            3
        } else {
            4
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
