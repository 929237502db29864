use std::path::PathBuf;

use thiserror::Error;

use crate::annotator::ParseError;
use crate::gateway::GatewayError;
use crate::model::ModelError;
use crate::probing::ProbeError;
use crate::retrieval::RetrievalError;
use crate::skillspace::SkillspaceError;
use crate::validation::ValidationError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Skillspace(#[from] SkillspaceError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{path}:{line}: {source}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing artifact {0} (run the stage that produces it first)")]
    MissingArtifact(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
