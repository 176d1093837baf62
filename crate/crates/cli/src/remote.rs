//! Teacher reached over HTTP.
//!
//! Each deferral is sent as `POST <url>` with body
//! `{"id": ..., "text": ..., "embedding": [...]}` and the endpoint answers
//! `{"label": "..."}`. Any transport failure, non-2xx status or malformed
//! body is an error; no label is ever invented.

use std::time::Duration;

use deferral_core::router::{TeacherClient, TeacherError, TeacherQuery};
use serde::{Deserialize, Serialize};

#[derive(Serialize)]
struct Request<'a> {
    id: &'a str,
    text: Option<&'a str>,
    embedding: &'a [f64],
}

#[derive(Deserialize)]
struct Response {
    label: String,
}

pub struct RemoteEndpoint {
    url: String,
    agent: ureq::Agent,
}

impl RemoteEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { url: url.into(), agent }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl TeacherClient for RemoteEndpoint {
    fn classify(&self, query: &TeacherQuery<'_>) -> Result<String, TeacherError> {
        let body = Request {
            id: query.id,
            text: query.text,
            embedding: query.embedding,
        };
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| TeacherError::Transport(format!("{}: {e}", self.url)))?;
        let parsed: Response = response
            .body_mut()
            .read_json()
            .map_err(|e| TeacherError::Malformed(e.to_string()))?;
        if parsed.label.trim().is_empty() {
            return Err(TeacherError::Malformed("empty label".into()));
        }
        Ok(parsed.label)
    }
}
