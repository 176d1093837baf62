//! The output directory: trace buffer, routing state, versioned reports and
//! the JSON-lines run log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use deferral_core::artifacts::{emit_report, parse_report, Report, ReportFormat};
use deferral_core::router::RoutingState;
use deferral_core::trace_store::{read_trace_file, write_trace_file, TraceBuffer, TraceRecord};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

/// One line of `run.log`.
#[derive(Debug, Serialize)]
pub struct LogEntry<'a, C: Serialize, O: Serialize> {
    pub unix_time: u64,
    pub command: &'a str,
    pub config: &'a C,
    pub inputs: Vec<String>,
    pub outcome: O,
    pub exit_code: i32,
}

pub fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Reads a trace file, failing on unreadable, malformed or empty files.
pub fn read_traces(path: &Path) -> Result<Vec<TraceRecord>, CliError> {
    let records = read_trace_file(path).map_err(|source| CliError::TraceFile {
        path: path.display().to_string(),
        source,
    })?;
    if records.is_empty() {
        return Err(CliError::EmptyTraceFile(path.display().to_string()));
    }
    Ok(records)
}

/// Builds a buffer from a trace file.
pub fn load_buffer_file(path: &Path) -> Result<TraceBuffer, CliError> {
    let mut buffer = TraceBuffer::new();
    buffer.ingest(read_traces(path)?).map_err(|source| CliError::TraceFile {
        path: path.display().to_string(),
        source,
    })?;
    Ok(buffer)
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn buffer_path(&self) -> PathBuf {
        self.root.join("buffer.jsonl")
    }

    pub fn state_path(&self) -> PathBuf {
        self.root.join("state.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("run.log")
    }

    pub fn report_path(&self, version: u64, format: ReportFormat) -> PathBuf {
        let ext = match format {
            ReportFormat::Structured => "json",
            ReportFormat::HumanReadable => "md",
        };
        self.reports_dir().join(format!("report-v{version}.{ext}"))
    }

    pub fn ensure(&self) -> Result<(), CliError> {
        fs::create_dir_all(self.reports_dir())?;
        Ok(())
    }

    pub fn load_buffer(&self) -> Result<Option<TraceBuffer>, CliError> {
        let path = self.buffer_path();
        if !path.exists() {
            return Ok(None);
        }
        let mut buffer = TraceBuffer::new();
        let records = read_trace_file(&path).map_err(|source| CliError::TraceFile {
            path: path.display().to_string(),
            source,
        })?;
        buffer.ingest(records)?;
        Ok(Some(buffer))
    }

    pub fn save_buffer(&self, buffer: &TraceBuffer) -> Result<(), CliError> {
        self.ensure()?;
        let path = self.buffer_path();
        let tmp = path.with_extension("tmp");
        write_trace_file(&tmp, &buffer.to_records())?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load_state(&self) -> Result<Option<RoutingState>, CliError> {
        let path = self.state_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        RoutingState::from_json(&text).map(Some).map_err(|e| CliError::Document {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save_state(&self, state: &RoutingState) -> Result<(), CliError> {
        self.ensure()?;
        write_atomic(&self.state_path(), state.to_json().as_bytes())
    }

    /// Writes `report-v{N}.json` and `report-v{N}.md`.
    pub fn save_report(&self, report: &Report) -> Result<(), CliError> {
        self.ensure()?;
        for format in [ReportFormat::Structured, ReportFormat::HumanReadable] {
            write_atomic(&self.report_path(report.version(), format), emit_report(report, format).as_bytes())?;
        }
        Ok(())
    }

    pub fn latest_report_version(&self) -> Result<Option<u64>, CliError> {
        let dir = self.reports_dir();
        if !dir.exists() {
            return Ok(None);
        }
        let mut latest = None;
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name();
            let version = name
                .to_str()
                .and_then(|n| n.strip_prefix("report-v"))
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<u64>().ok());
            latest = latest.max(version);
        }
        Ok(latest)
    }

    pub fn load_report(&self, version: u64) -> Result<Report, CliError> {
        let path = self.report_path(version, ReportFormat::Structured);
        if !path.exists() {
            return Err(CliError::Missing("report"));
        }
        Ok(parse_report(&fs::read_to_string(path)?)?)
    }

    pub fn append_log<C: Serialize, O: Serialize>(&self, entry: &LogEntry<'_, C, O>) -> Result<(), CliError> {
        fs::create_dir_all(&self.root)?;
        let mut file = OpenOptions::new().create(true).append(true).open(self.log_path())?;
        let line = serde_json::to_string(entry).map_err(std::io::Error::other)?;
        writeln!(file, "{line}")?;
        Ok(())
    }
}
