use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run aborted: {0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<bm_core::Error> for CliError {
    fn from(e: bm_core::Error) -> Self {
        use bm_core::Error as E;
        match e {
            E::Config(_) | E::Dimension { .. } | E::Index(_) => CliError::Config(e.to_string()),
            E::NonFinite(_) | E::Contract(_) | E::Abort(_) => CliError::Runtime(e.to_string()),
            E::Format(_) | E::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
