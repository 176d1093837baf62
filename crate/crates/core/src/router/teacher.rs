//! Teacher clients. The teacher is the expensive upstream classifier whose
//! answers become training labels.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::trace_store::{read_trace_file, StoreError, TraceRecord};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("teacher oracle has no label for id `{0}`")]
    UnknownId(String),
    #[error("teacher request failed: {0}")]
    Transport(String),
    #[error("teacher returned a malformed response: {0}")]
    Malformed(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What the teacher sees for one input.
#[derive(Debug, Clone, Copy)]
pub struct TeacherQuery<'a> {
    pub id: &'a str,
    pub text: Option<&'a str>,
    pub embedding: &'a [f64],
}

pub trait TeacherClient: Send + Sync {
    /// Returns the teacher's label string. Failures must surface as errors,
    /// never as a fallback label.
    fn classify(&self, query: &TeacherQuery<'_>) -> Result<String, TeacherError>;
}

/// Replays cached teacher labels keyed by trace id.
#[derive(Debug, Clone, Default)]
pub struct CachedOracle {
    labels: HashMap<String, String>,
}

impl CachedOracle {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a TraceRecord>) -> Self {
        Self {
            labels: records
                .into_iter()
                .map(|r| (r.id.clone(), r.teacher_label.clone()))
                .collect(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TeacherError> {
        let records = read_trace_file(path)?;
        Ok(Self::from_records(&records))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl TeacherClient for CachedOracle {
    fn classify(&self, query: &TeacherQuery<'_>) -> Result<String, TeacherError> {
        self.labels
            .get(query.id)
            .cloned()
            .ok_or_else(|| TeacherError::UnknownId(query.id.to_owned()))
    }
}
