use std::fmt;

/// Failure of a command: a short machine-parsable category plus a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(category: &'static str, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }

    /// The one line printed on failure, newlines folded.
    pub fn line(&self) -> String {
        format!("error: {}: {}", self.category, self.message.replace('\n', "; "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<boostdet::Error> for CliError {
    fn from(e: boostdet::Error) -> Self {
        Self::new(e.category(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("json", e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::new("csv", e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
