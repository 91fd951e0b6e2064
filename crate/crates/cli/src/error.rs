use mobilex_core::Category;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub mod exit {
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const NUMERIC: u8 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mobilex_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Io(_) => exit::OTHER,
            CliError::Core(e) => match e.category() {
                Category::Config => exit::CONFIG,
                Category::Data => exit::DATA,
                Category::Numeric => exit::NUMERIC,
                Category::Io => exit::OTHER,
            },
        }
    }
}
