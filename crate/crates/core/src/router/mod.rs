//! Live routing state, per-input routing, and the refit flywheel.
//!
//! An input is served by the surrogate when the active pipeline's acceptor
//! score reaches its threshold, and by the teacher otherwise. Every teacher
//! answer is appended to the trace buffer, and each refit trains from
//! scratch on the whole buffer.

pub mod teacher;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acceptor::{confidence_features, fit_acceptor, AcceptorError, AcceptorModel};
use crate::artifacts::{build_report, ArtifactConfig, ArtifactError, Report, ReportContext};
use crate::gatekeeper::{
    build_global_candidate, build_l2d_candidate, parity_gate, Alpha, GateDecision, GateError, GateVerdict,
    PipelineCandidate, RefusalReason, DEFAULT_COVERAGE_FLOOR,
};
use crate::surrogate::{fit_pool, select_best, Family, ModelError, SurrogateModel, TrainConfig};
use crate::trace_store::{LabelId, Split, SplitFractions, StoreError, Trace, TraceBuffer, TraceRecord};

pub use teacher::{CachedOracle, TeacherClient, TeacherError, TeacherQuery};

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("embedding dimension {found} does not match pipeline dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("trace buffer is empty")]
    EmptyBuffer,
    #[error("input id `{0}` already has a trace in the buffer")]
    DuplicateId(String),
    #[error("teacher call failed: {0}")]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Acceptor(#[from] AcceptorError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivePipeline {
    pub pipeline: PipelineCandidate,
    pub version: u64,
    pub fitted_at_day: u32,
}

/// The live routing configuration. Version 0 is the initial, never-fitted
/// state; every refit publishes `version + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RoutingState {
    TeacherOnly { version: u64 },
    Active(ActivePipeline),
}

impl Default for RoutingState {
    fn default() -> Self {
        RoutingState::TeacherOnly { version: 0 }
    }
}

impl RoutingState {
    pub fn version(&self) -> u64 {
        match self {
            RoutingState::TeacherOnly { version } => *version,
            RoutingState::Active(a) => a.version,
        }
    }

    pub fn pipeline(&self) -> Option<&PipelineCandidate> {
        match self {
            RoutingState::TeacherOnly { .. } => None,
            RoutingState::Active(a) => Some(&a.pipeline),
        }
    }

    pub fn is_active(&self) -> bool {
        matches!(self, RoutingState::Active(_))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("routing state serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum RouteDecision {
    Handled { label: LabelId, score: f64 },
    /// Score is 0 under [`RoutingState::TeacherOnly`].
    Deferred { score: f64 },
}

impl RouteDecision {
    pub fn is_handled(&self) -> bool {
        matches!(self, RouteDecision::Handled { .. })
    }

    pub fn score(&self) -> f64 {
        match *self {
            RouteDecision::Handled { score, .. } | RouteDecision::Deferred { score } => score,
        }
    }
}

/// Routes one embedding. Pure: never touches state or buffer.
pub fn route(state: &RoutingState, embedding: &[f64]) -> Result<RouteDecision, RouterError> {
    let Some(pipeline) = state.pipeline() else {
        return Ok(RouteDecision::Deferred { score: 0.0 });
    };
    let dim = pipeline.surrogate.dim;
    if embedding.len() != dim {
        return Err(RouterError::DimensionMismatch {
            expected: dim,
            found: embedding.len(),
        });
    }
    let s = pipeline.score(embedding)?;
    Ok(if s.handled {
        RouteDecision::Handled {
            label: s.predicted,
            score: s.score,
        }
    } else {
        RouteDecision::Deferred { score: s.score }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveInput {
    pub id: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    pub decision: RouteDecision,
}

/// Serves one input. Deferred inputs go to the teacher and their answer is
/// logged as a new trace tagged with `day`; handled inputs leave the buffer
/// untouched. On teacher failure nothing is appended.
pub fn classify(
    state: &RoutingState,
    input: &LiveInput,
    teacher: &dyn TeacherClient,
    buffer: &mut TraceBuffer,
    day: u32,
) -> Result<Classification, RouterError> {
    let decision = route(state, &input.embedding)?;
    if let RouteDecision::Handled { label, .. } = decision {
        let pipeline = state.pipeline().expect("handled implies active");
        let name = pipeline
            .surrogate
            .labels
            .name(label)
            .expect("surrogate predicts within its label snapshot")
            .to_owned();
        return Ok(Classification { label: name, decision });
    }
    if buffer.contains_id(&input.id) {
        return Err(RouterError::DuplicateId(input.id.clone()));
    }
    let label = teacher.classify(&TeacherQuery {
        id: &input.id,
        text: input.text.as_deref(),
        embedding: &input.embedding,
    })?;
    buffer.ingest(vec![TraceRecord {
        id: input.id.clone(),
        text: input.text.clone(),
        embedding: input.embedding.clone(),
        teacher_label: label.clone(),
        day,
        ground_truth: None,
    }])?;
    Ok(Classification { label, decision })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub alpha: Alpha,
    pub floor: f64,
    pub fractions: SplitFractions,
    pub train: TrainConfig,
    pub artifacts: ArtifactConfig,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            alpha: Alpha::new(0.95).expect("valid"),
            floor: DEFAULT_COVERAGE_FLOOR,
            fractions: SplitFractions::default(),
            train: TrainConfig::default(),
            artifacts: ArtifactConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub family: Family,
    pub macro_f1: f64,
}

/// Alpha-independent part of a refit: the selected surrogate and its
/// acceptor.
#[derive(Debug, Clone)]
pub struct TrainedPool {
    pub surrogate: Arc<SurrogateModel>,
    pub acceptor: AcceptorModel,
    pub selection: Vec<FamilyScore>,
}

#[derive(Debug, Clone)]
pub enum TrainingOutcome {
    Trained(TrainedPool),
    Refused(RefusalReason),
}

/// Trains the surrogate pool on the Train split, selects by macro-F1 on
/// Validation, and fits the acceptor on Validation agreement bits.
pub fn train_pool(buffer: &TraceBuffer, fractions: &SplitFractions, cfg: &TrainConfig) -> Result<TrainingOutcome, RouterError> {
    if buffer.is_empty() {
        return Err(RouterError::EmptyBuffer);
    }
    let train = buffer.traces_for(Split::Train, fractions);
    let validation = buffer.traces_for(Split::Validation, fractions);
    let distinct: BTreeSet<LabelId> = train.iter().map(|t| t.teacher_label).collect();
    if distinct.len() < 2 {
        return Ok(TrainingOutcome::Refused(RefusalReason::InsufficientClasses));
    }
    if validation.is_empty() {
        return Ok(TrainingOutcome::Refused(RefusalReason::NoCandidates));
    }
    let labels = buffer.labels();
    let pool = fit_pool(&train, labels, cfg)?;
    let selected = select_best(&pool, &validation, labels)?;
    let selection = pool
        .iter()
        .zip(&selected.scores)
        .map(|(m, s)| FamilyScore {
            family: m.family,
            macro_f1: *s,
        })
        .collect();
    let surrogate = Arc::new(selected.model.clone());

    let mut features = Vec::with_capacity(validation.len());
    let mut agreement = Vec::with_capacity(validation.len());
    for t in &validation {
        let p = surrogate.predict_proba(&t.embedding)?;
        features.push(confidence_features(&p)?);
        agreement.push(p.argmax() == t.teacher_label);
    }
    let acceptor = if features.len() < 2 {
        AcceptorModel::constant(agreement[0], cfg.seed)
    } else {
        fit_acceptor(&features, &agreement, cfg)?
    };
    Ok(TrainingOutcome::Trained(TrainedPool {
        surrogate,
        acceptor,
        selection,
    }))
}

/// Builds both candidate families on Calibration and gates them on Shadow.
pub fn gate_pool(outcome: &TrainingOutcome, buffer: &TraceBuffer, alpha: Alpha, floor: f64, fractions: &SplitFractions) -> Result<GateDecision, RouterError> {
    let refused = |reason| GateDecision {
        alpha,
        floor,
        verdict: GateVerdict::Refused { reason },
        evaluations: Vec::new(),
    };
    let pool = match outcome {
        TrainingOutcome::Refused(reason) => return Ok(refused(*reason)),
        TrainingOutcome::Trained(p) => p,
    };
    let calibration = buffer.traces_for(Split::Calibration, fractions);
    let shadow = buffer.traces_for(Split::Shadow, fractions);
    if calibration.is_empty() || shadow.is_empty() {
        return Ok(refused(RefusalReason::NoCandidates));
    }
    let mut candidates = Vec::with_capacity(2);
    if let Some(c) = build_global_candidate(pool.surrogate.clone(), &calibration, alpha)? {
        candidates.push(c);
    }
    if let Some(c) = build_l2d_candidate(pool.surrogate.clone(), pool.acceptor.clone(), &calibration, alpha)? {
        candidates.push(c);
    }
    Ok(parity_gate(candidates, &shadow, alpha, floor)?)
}

/// Result of one fit or update.
#[derive(Debug, Clone)]
pub struct Refit {
    pub state: RoutingState,
    pub decision: GateDecision,
    pub selection: Vec<FamilyScore>,
    pub buffer_len: usize,
    pub report: Report,
}

/// Turns a trained pool into a new routing state and its report.
pub fn complete_refit(
    outcome: &TrainingOutcome,
    buffer: &TraceBuffer,
    previous: &RoutingState,
    alpha: Alpha,
    cfg: &RouterConfig,
) -> Result<Refit, RouterError> {
    let decision = gate_pool(outcome, buffer, alpha, cfg.floor, &cfg.fractions)?;
    let version = previous.version() + 1;
    let state = match &decision.verdict {
        GateVerdict::Promoted { candidate, .. } => RoutingState::Active(ActivePipeline {
            pipeline: candidate.clone(),
            version,
            fitted_at_day: buffer.latest_day().unwrap_or(0),
        }),
        GateVerdict::Refused { .. } => RoutingState::TeacherOnly { version },
    };
    let reference = buffer.traces_for(Split::Shadow, &cfg.fractions);
    let report = build_report(&ReportContext {
        decision: &decision,
        previous,
        current: &state,
        reference: &reference,
        labels: buffer.labels(),
        config: &cfg.artifacts,
    })?;
    Ok(Refit {
        state,
        decision,
        selection: match outcome {
            TrainingOutcome::Trained(p) => p.selection.clone(),
            TrainingOutcome::Refused(_) => Vec::new(),
        },
        buffer_len: buffer.len(),
        report,
    })
}

/// Full refit chain on the current buffer: split, train the pool, select,
/// fit the acceptor, build candidates, gate.
pub fn fit(buffer: &TraceBuffer, previous: &RoutingState, cfg: &RouterConfig) -> Result<Refit, RouterError> {
    let outcome = train_pool(buffer, &cfg.fractions, &cfg.train)?;
    complete_refit(&outcome, buffer, previous, cfg.alpha, cfg)
}

/// Merges `new_traces` into the buffer and refits from scratch.
pub fn update(
    previous: &RoutingState,
    new_traces: Vec<TraceRecord>,
    buffer: &mut TraceBuffer,
    cfg: &RouterConfig,
) -> Result<Refit, RouterError> {
    buffer.ingest(new_traces)?;
    fit(buffer, previous, cfg)
}

/// Traces used as the artifact and delta reference set.
pub fn reference_set<'a>(buffer: &'a TraceBuffer, fractions: &SplitFractions) -> Vec<&'a Trace> {
    buffer.traces_for(Split::Shadow, fractions)
}
