use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singularity: t = {t} is within {eps} of 1")]
    Singularity { t: f64, eps: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error in {context}{}: {detail}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric {
        context: &'static str,
        step: Option<usize>,
        detail: String,
    },
    #[error("training diverged in stage {stage} at iteration {iteration}: loss {loss}")]
    Training {
        stage: u8,
        iteration: usize,
        loss: f64,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            found,
        })
    }
}
