use cadence_core::Error;

/// Command failure, classified by process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or violated preconditions (exit 2).
    Usage(String),
    /// Unreadable or inconsistent input data (exit 3).
    Data(String),
    /// A verification check did not pass (exit 4).
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Verification(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Verification(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::InvalidArgument(_) | Error::Precondition(_) => CliError::Usage(message),
            Error::Diverged(_) => CliError::Verification(message),
            _ => CliError::Data(message),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
