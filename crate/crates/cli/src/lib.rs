//! Configuration, invariant checks and experiment commands behind the
//! `driftlab` binary.

pub mod check;
pub mod commands;
pub mod config;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::CheckFailed(_) => 4,
            Self::Io(_) => 1,
        }
    }
}

impl From<driftlab::Error> for CliError {
    fn from(e: driftlab::Error) -> Self {
        use driftlab::Error as E;
        match e {
            E::Config(s) => Self::Config(s),
            E::Parse(_) | E::Dimension { .. } | E::Domain(_) => Self::Config(e.to_string()),
            E::Numeric { .. } | E::Singularity { .. } | E::Training { .. } => Self::Numeric(e.to_string()),
        }
    }
}
