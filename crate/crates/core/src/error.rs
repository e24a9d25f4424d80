use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("training error in `{component}`: {message}")]
    Training { component: String, message: String },
    #[error("gradient check error: {0}")]
    Check(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn training(component: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Training {
            component: component.into(),
            message: message.into(),
        }
    }

    /// Short machine-parsable category, used for CLI exit messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Input(_) => "input",
            Error::Encoding(_) => "encoding",
            Error::Training { .. } => "training",
            Error::Check(_) => "check",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Format(_) => "format",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
