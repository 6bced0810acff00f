use gmmdc::GmmError;

/// Process exit status for a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad input: unreadable files, missing columns, invalid settings.
    Data = 2,
    /// The data parsed but the estimator could not be computed.
    Numerical = 3,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Data,
            message: message.into(),
        }
    }
}

impl From<GmmError> for CliError {
    fn from(e: GmmError) -> Self {
        let kind = if e.is_numerical() {
            ExitKind::Numerical
        } else {
            ExitKind::Data
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::data(format!("CSV error: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
