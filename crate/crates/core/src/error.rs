use std::path::PathBuf;

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(String),
    #[error("benchmark: {0}")]
    Data(String),
    #[error("federation: {0}")]
    Federation(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss on client {client} (round {round}, step {step}, branch {branch}): ce={ce} kl={kl}")]
    NonFiniteLoss {
        client: usize,
        round: usize,
        step: usize,
        branch: &'static str,
        ce: f64,
        kl: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
