use std::io::Write;
use std::path::{Path, PathBuf};

use deferral_core::artifacts::{emit_report, ReportFormat};
use deferral_core::bench::{cost_projection, evaluate_state, run_alpha_sweep, PriceModel, SyntheticSpec, SyntheticWorld};
use deferral_core::gatekeeper::{Alpha, GateVerdict, PipelineFamily, RefusalReason};
use deferral_core::router::{self, Refit, RoutingState};
use deferral_core::trace_store::{read_trace_file, write_trace_file, TraceBuffer};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::workspace::{load_buffer_file, read_traces, Workspace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_REFUSED: i32 = 2;

/// Exit code and structured outcome of one command, recorded in the run log.
pub struct Outcome {
    pub exit_code: i32,
    pub record: Value,
}

impl Outcome {
    fn ok(record: Value) -> Self {
        Self {
            exit_code: EXIT_OK,
            record,
        }
    }
}

/// What a refit decided, as printed by `fit`/`update` and returned by the
/// service's refit endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictSummary {
    pub version: u64,
    pub promoted: bool,
    pub family: Option<PipelineFamily>,
    pub tau: Option<f64>,
    pub reason: Option<RefusalReason>,
    pub shadow_coverage: Option<f64>,
    pub shadow_ta: Option<f64>,
    pub buffer_len: usize,
}

impl VerdictSummary {
    pub fn from_refit(refit: &Refit) -> Self {
        let (family, tau, reason, coverage, ta) = match &refit.decision.verdict {
            GateVerdict::Promoted { candidate, shadow } => (Some(candidate.family()), candidate.tau(), None, Some(shadow.coverage), shadow.ta_on_handled),
            GateVerdict::Refused { reason } => (None, None, Some(*reason), None, None),
        };
        Self {
            version: refit.state.version(),
            promoted: reason.is_none(),
            family,
            tau,
            reason,
            shadow_coverage: coverage,
            shadow_ta: ta,
            buffer_len: refit.buffer_len,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.promoted {
            EXIT_OK
        } else {
            EXIT_REFUSED
        }
    }

    /// `Promoted: Global, cov=1.000, ta=0.972 (version 1, 5000 traces)`.
    pub fn line(&self) -> String {
        let tail = format!("(version {}, {} traces)", self.version, self.buffer_len);
        match (self.family, self.reason) {
            (Some(family), _) => {
                let name = match family {
                    PipelineFamily::Global => "Global".to_owned(),
                    PipelineFamily::L2d => format!("L2D, tau={:.4}", self.tau.unwrap_or(f64::NAN)),
                };
                let ta = self.shadow_ta.map_or_else(|| "n/a".to_owned(), |t| format!("{t:.3}"));
                format!("Promoted: {name}, cov={:.3}, ta={ta} {tail}", self.shadow_coverage.unwrap_or(0.0))
            }
            (None, Some(reason)) => format!("Refused: {reason} {tail}"),
            (None, None) => format!("Refused {tail}"),
        }
    }
}

/// Writes command output to stdout. A closed pipe (as with `| head`) is
/// not an error for the command itself.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.flush());
}

fn workspace(cfg: &RunConfig) -> Workspace {
    Workspace::new(&cfg.out)
}

/// Persists the outcome of a refit and prints its summary.
pub fn persist_refit(ws: &Workspace, buffer: &TraceBuffer, refit: &Refit) -> Result<VerdictSummary, CliError> {
    ws.save_buffer(buffer)?;
    ws.save_state(&refit.state)?;
    ws.save_report(&refit.report)?;
    Ok(VerdictSummary::from_refit(refit))
}

fn refit_outcome(summary: VerdictSummary, ws: &Workspace) -> Outcome {
    emit(&format!(
        "{}\nreport: {}\n",
        summary.line(),
        ws.report_path(summary.version, ReportFormat::HumanReadable).display()
    ));
    Outcome {
        exit_code: summary.exit_code(),
        record: serde_json::to_value(&summary).expect("summary serializes"),
    }
}

pub fn fit(cfg: &RunConfig, traces: &Path) -> Result<Outcome, CliError> {
    let buffer = load_buffer_file(traces)?;
    let ws = workspace(cfg);
    let previous = ws.load_state()?.unwrap_or_default();
    let refit = router::fit(&buffer, &previous, &cfg.router_config())?;
    let summary = persist_refit(&ws, &buffer, &refit)?;
    Ok(refit_outcome(summary, &ws))
}

pub fn update(cfg: &RunConfig, traces: Option<&Path>) -> Result<Outcome, CliError> {
    let ws = workspace(cfg);
    let mut buffer = ws.load_buffer()?.ok_or(CliError::Missing("trace buffer"))?;
    let previous = ws.load_state()?.ok_or(CliError::Missing("routing state"))?;
    let records = match traces {
        Some(path) => read_trace_file(path).map_err(|source| CliError::TraceFile {
            path: path.display().to_string(),
            source,
        })?,
        None => Vec::new(),
    };
    let refit = router::update(&previous, records, &mut buffer, &cfg.router_config())?;
    let summary = persist_refit(&ws, &buffer, &refit)?;
    Ok(refit_outcome(summary, &ws))
}

pub fn evaluate(cfg: &RunConfig, traces: &Path, price: PriceModel) -> Result<Outcome, CliError> {
    let state = workspace(cfg).load_state()?.ok_or(CliError::Missing("routing state"))?;
    let labels = state.pipeline().map(|p| p.surrogate.labels.clone()).unwrap_or_default();
    let mut data = TraceBuffer::with_labels(labels);
    data.ingest(read_traces(traces)?).map_err(|source| CliError::TraceFile {
        path: traces.display().to_string(),
        source,
    })?;
    let refs: Vec<_> = data.traces().iter().collect();
    let metrics = evaluate_state(&state, &refs)?;
    let record = json!({
        "version": state.version(),
        "metrics": metrics,
        "cost": cost_projection(metrics.coverage, price),
    });
    emit(&format!("{}\n", serde_json::to_string_pretty(&record).expect("json")));
    Ok(Outcome::ok(record))
}

pub fn sweep(cfg: &RunConfig, traces: &Path, test: &Path, alphas: Option<&[f64]>, days: Option<usize>) -> Result<Outcome, CliError> {
    let train = load_buffer_file(traces)?;
    let mut held_out = TraceBuffer::with_labels(train.labels().clone());
    held_out.ingest(read_traces(test)?).map_err(|source| CliError::TraceFile {
        path: test.display().to_string(),
        source,
    })?;
    let alphas: Vec<Alpha> = match alphas {
        Some(values) => values
            .iter()
            .map(|&a| Alpha::new(a).map_err(|e| CliError::Config(e.to_string())))
            .collect::<Result<_, _>>()?,
        None => Alpha::sweep(),
    };
    let days = days.unwrap_or_else(|| train.day_counts().len());
    let result = run_alpha_sweep(&train, &held_out, days, &alphas, &cfg.router_config())?;

    let ws = workspace(cfg);
    std::fs::create_dir_all(ws.root())?;
    std::fs::write(ws.root().join("sweep.csv"), result.to_csv())?;
    std::fs::write(ws.root().join("sweep.md"), result.to_table())?;
    std::fs::write(ws.root().join("sweep.json"), result.to_json())?;
    emit(&result.to_table());
    Ok(Outcome::ok(json!({ "days": days, "rows": result.rows })))
}

pub fn report(cfg: &RunConfig, version: Option<u64>, format: ReportFormat) -> Result<Outcome, CliError> {
    let ws = workspace(cfg);
    let version = match version {
        Some(v) => v,
        None => ws.latest_report_version()?.ok_or(CliError::Missing("report"))?,
    };
    let report = ws.load_report(version)?;
    emit(&format!("{}\n", emit_report(&report, format)));
    Ok(Outcome::ok(json!({ "version": version })))
}

pub fn generate(cfg: &RunConfig, spec: SyntheticSpec) -> Result<Outcome, CliError> {
    let world = SyntheticWorld::new(spec)?;
    let ws = workspace(cfg);
    std::fs::create_dir_all(ws.root())?;
    let mut written: Vec<(PathBuf, usize)> = Vec::new();
    for (name, buffer) in [("train.jsonl", world.training_buffer()), ("test.jsonl", world.test_buffer())] {
        let path = ws.root().join(name);
        write_trace_file(&path, &buffer.to_records())?;
        emit(&format!("wrote {} traces to {}\n", buffer.len(), path.display()));
        written.push((path, buffer.len()));
    }
    Ok(Outcome::ok(json!({
        "spec": spec,
        "files": written.iter().map(|(p, n)| json!({"path": p, "traces": n})).collect::<Vec<_>>(),
    })))
}

/// Loads the routing state for serving. A missing state is allowed only
/// when a teacher can answer every request.
pub fn serving_state(ws: &Workspace, has_teacher: bool) -> Result<(RoutingState, TraceBuffer), CliError> {
    let state = match ws.load_state()? {
        Some(s) => s,
        None if has_teacher => RoutingState::default(),
        None => return Err(CliError::Config("no routing state in the output directory and no teacher configured".into())),
    };
    let buffer = ws.load_buffer()?.unwrap_or_default();
    Ok((state, buffer))
}
