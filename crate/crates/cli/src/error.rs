use std::path::PathBuf;

/// Failures surfaced by `sekit` commands. Configuration problems map to exit
/// status 2, everything else to 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] sekit::Error),

    #[error("{failed} of {total} items failed: {summary}")]
    Partial {
        failed: usize,
        total: usize,
        summary: String,
    },

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ConfigFile { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn partial(total: usize, failures: &[(String, String)]) -> Self {
        let summary = failures
            .iter()
            .take(5)
            .map(|(id, msg)| format!("{id}: {msg}"))
            .collect::<Vec<_>>()
            .join("; ");
        CliError::Partial {
            failed: failures.len(),
            total,
            summary,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
