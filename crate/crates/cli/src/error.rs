use deferral_core::artifacts::ArtifactError;
use deferral_core::bench::{ProtocolError, SpecError};
use deferral_core::router::{RouterError, TeacherError};
use deferral_core::trace_store::StoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    TraceFile { path: String, source: StoreError },
    #[error("{0}: trace file contains no traces")]
    EmptyTraceFile(String),
    #[error("no {0} found in the output directory; run `deferral fit` first")]
    Missing(&'static str),
    #[error("{path}: {message}")]
    Document { path: String, message: String },
    #[error("teacher setup failed: {0}")]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
