use tase::TaseError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] TaseError),
}

impl CliError {
    /// 2 config error, 3 data error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                TaseError::Config(_) => 2,
                TaseError::NonFinite(_) | TaseError::Diverged { .. } => 4,
                TaseError::Shape(_) | TaseError::Precondition(_) | TaseError::Format(_) | TaseError::Io(_) => 3,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            _ => "numerical",
        }
    }

    /// Single line for standard error: `error kind=<kind> code=<n> message=<json string>`.
    pub fn line(&self) -> String {
        format!(
            "error kind={} code={} message={}",
            self.kind(),
            self.exit_code(),
            serde_json::to_string(&self.to_string()).unwrap_or_default()
        )
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
