//! Threshold calibration, Global/L2D candidate construction and the parity
//! gate.
//!
//! A candidate is promoted only if, on the shadow split, its teacher
//! agreement on handled traffic is at least `alpha` and its coverage clears
//! the floor. Among feasible candidates the one with the highest shadow
//! coverage wins; Global beats L2D on ties, then the larger threshold.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acceptor::{confidence_features, AcceptorError, AcceptorModel};
use crate::surrogate::{ModelError, SurrogateModel};
use crate::trace_store::{LabelId, Trace};

pub const DEFAULT_COVERAGE_FLOOR: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("coverage floor must lie in [0, 1], got {0}")]
    InvalidFloor(f64),
    #[error("evaluation set is empty")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Acceptor(#[from] AcceptorError),
}

/// Target teacher-agreement level.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(value: f64) -> Result<Self, GateError> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(GateError::InvalidAlpha(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The benchmark sweep levels.
    pub fn sweep() -> Vec<Alpha> {
        [0.80, 0.85, 0.90, 0.95].into_iter().map(Alpha).collect()
    }
}

impl TryFrom<f64> for Alpha {
    type Error = GateError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Alpha::new(value)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauCalibration {
    pub tau: f64,
    pub coverage: f64,
    pub ta: f64,
}

/// Teacher agreement `agree / handled`, the one formula every feasibility
/// check in the crate uses.
pub fn agreement_rate(agree: usize, handled: usize) -> f64 {
    agree as f64 / handled as f64
}

/// Sweeps every unique score as a threshold (`handled = score >= tau`) and
/// returns the feasible one (`TA >= alpha`) with maximal coverage.
///
/// Coverage strictly grows as the threshold drops through the unique scores,
/// so the maximum is unique.
pub fn calibrate_tau(scores: &[f64], agreement: &[bool], alpha: Alpha) -> Option<TauCalibration> {
    assert_eq!(scores.len(), agreement.len(), "scores and agreement differ in length");
    let n = scores.len();
    if n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut best = None;
    let (mut handled, mut agree) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        let tau = scores[order[i]];
        while i < n && scores[order[i]] == tau {
            handled += 1;
            agree += usize::from(agreement[order[i]]);
            i += 1;
        }
        let ta = agreement_rate(agree, handled);
        if ta >= alpha.value() {
            best = Some(TauCalibration {
                tau,
                coverage: handled as f64 / n as f64,
                ta,
            });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineFamily {
    Global,
    L2d,
}

impl fmt::Display for PipelineFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineFamily::Global => "Global",
            PipelineFamily::L2d => "L2D",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Gate {
    Global,
    L2d { acceptor: AcceptorModel, tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub handled: usize,
    pub coverage: f64,
    /// `None` when nothing was handled.
    pub ta_on_handled: Option<f64>,
    /// End-to-end accuracy against ground truth (surrogate on handled,
    /// teacher on deferred), over traces that carry ground truth.
    pub gt_accuracy: Option<f64>,
}

impl EvalMetrics {
    pub fn meets(&self, alpha: Alpha, floor: f64) -> bool {
        self.ta_on_handled.is_some_and(|ta| ta >= alpha.value()) && self.coverage >= floor
    }
}

/// Surrogate output on one input under a pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub predicted: LabelId,
    pub score: f64,
    pub handled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineCandidate {
    pub surrogate: Arc<SurrogateModel>,
    pub gate: Gate,
    /// Metrics on the calibration split at construction time.
    pub calibration: EvalMetrics,
}

impl PipelineCandidate {
    pub fn family(&self) -> PipelineFamily {
        match self.gate {
            Gate::Global => PipelineFamily::Global,
            Gate::L2d { .. } => PipelineFamily::L2d,
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match self.gate {
            Gate::Global => None,
            Gate::L2d { tau, .. } => Some(tau),
        }
    }

    /// Predicted label and acceptor score. Global pipelines report score 1.
    pub fn score(&self, embedding: &[f64]) -> Result<Scored, GateError> {
        let p = self.surrogate.predict_proba(embedding)?;
        let predicted = p.argmax();
        Ok(match &self.gate {
            Gate::Global => Scored {
                predicted,
                score: 1.0,
                handled: true,
            },
            Gate::L2d { acceptor, tau } => {
                let score = acceptor.score(&confidence_features(&p)?);
                Scored {
                    predicted,
                    score,
                    handled: score >= *tau,
                }
            }
        })
    }
}

pub fn evaluate_pipeline(candidate: &PipelineCandidate, data: &[&Trace]) -> Result<EvalMetrics, GateError> {
    if data.is_empty() {
        return Err(GateError::EmptyData);
    }
    let (mut handled, mut agree) = (0usize, 0usize);
    let (mut gt_n, mut gt_hits) = (0usize, 0usize);
    for t in data {
        let s = candidate.score(&t.embedding)?;
        let served = if s.handled {
            handled += 1;
            agree += usize::from(s.predicted == t.teacher_label);
            s.predicted
        } else {
            t.teacher_label
        };
        if let Some(gt) = t.ground_truth {
            gt_n += 1;
            gt_hits += usize::from(served == gt);
        }
    }
    Ok(EvalMetrics {
        n: data.len(),
        handled,
        coverage: handled as f64 / data.len() as f64,
        ta_on_handled: (handled > 0).then(|| agreement_rate(agree, handled)),
        gt_accuracy: (gt_n > 0).then(|| gt_hits as f64 / gt_n as f64),
    })
}

/// Global candidate, eligible only when the surrogate's overall agreement
/// on `calibration` is at least `alpha`.
pub fn build_global_candidate(model: Arc<SurrogateModel>, calibration: &[&Trace], alpha: Alpha) -> Result<Option<PipelineCandidate>, GateError> {
    let candidate = PipelineCandidate {
        surrogate: model,
        gate: Gate::Global,
        calibration: EvalMetrics {
            n: 0,
            handled: 0,
            coverage: 0.0,
            ta_on_handled: None,
            gt_accuracy: None,
        },
    };
    let metrics = evaluate_pipeline(&candidate, calibration)?;
    Ok(metrics.meets(alpha, 0.0).then_some(PipelineCandidate {
        calibration: metrics,
        ..candidate
    }))
}

/// Surrogate paired with `acceptor`, thresholded by [`calibrate_tau`] on the
/// calibration split.
pub fn build_l2d_candidate(
    model: Arc<SurrogateModel>,
    acceptor: AcceptorModel,
    calibration: &[&Trace],
    alpha: Alpha,
) -> Result<Option<PipelineCandidate>, GateError> {
    if calibration.is_empty() {
        return Err(GateError::EmptyData);
    }
    let mut scores = Vec::with_capacity(calibration.len());
    let mut agreement = Vec::with_capacity(calibration.len());
    for t in calibration {
        let p = model.predict_proba(&t.embedding)?;
        scores.push(acceptor.score(&confidence_features(&p)?));
        agreement.push(p.argmax() == t.teacher_label);
    }
    let Some(cal) = calibrate_tau(&scores, &agreement, alpha) else {
        return Ok(None);
    };
    let candidate = PipelineCandidate {
        surrogate: model,
        gate: Gate::L2d { acceptor, tau: cal.tau },
        calibration: EvalMetrics {
            n: 0,
            handled: 0,
            coverage: 0.0,
            ta_on_handled: None,
            gt_accuracy: None,
        },
    };
    let metrics = evaluate_pipeline(&candidate, calibration)?;
    debug_assert_eq!(metrics.coverage, cal.coverage);
    Ok(Some(PipelineCandidate {
        calibration: metrics,
        ..candidate
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefusalReason {
    NoFeasibleTau,
    BelowCoverageFloor,
    NoCandidates,
    /// Fewer than two teacher labels in the training split.
    InsufficientClasses,
}

impl fmt::Display for RefusalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefusalReason::NoFeasibleTau => "no-feasible-tau",
            RefusalReason::BelowCoverageFloor => "below-coverage-floor",
            RefusalReason::NoCandidates => "no-candidates",
            RefusalReason::InsufficientClasses => "insufficient-classes",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum GateVerdict {
    Promoted {
        candidate: PipelineCandidate,
        shadow: EvalMetrics,
    },
    Refused {
        reason: RefusalReason,
    },
}

impl GateVerdict {
    pub fn is_promoted(&self) -> bool {
        matches!(self, GateVerdict::Promoted { .. })
    }

    pub fn promoted(&self) -> Option<(&PipelineCandidate, &EvalMetrics)> {
        match self {
            GateVerdict::Promoted { candidate, shadow } => Some((candidate, shadow)),
            GateVerdict::Refused { .. } => None,
        }
    }
}

/// Per-candidate line of the gate log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub family: PipelineFamily,
    pub tau: Option<f64>,
    pub calibration: EvalMetrics,
    pub shadow: EvalMetrics,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub alpha: Alpha,
    pub floor: f64,
    pub verdict: GateVerdict,
    pub evaluations: Vec<CandidateEvaluation>,
}

pub fn parity_gate(candidates: Vec<PipelineCandidate>, shadow: &[&Trace], alpha: Alpha, floor: f64) -> Result<GateDecision, GateError> {
    if !(0.0..=1.0).contains(&floor) {
        return Err(GateError::InvalidFloor(floor));
    }
    if candidates.is_empty() {
        return Ok(GateDecision {
            alpha,
            floor,
            verdict: GateVerdict::Refused {
                reason: RefusalReason::NoCandidates,
            },
            evaluations: Vec::new(),
        });
    }
    if shadow.is_empty() {
        return Err(GateError::EmptyData);
    }

    let mut evaluations = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let metrics = evaluate_pipeline(c, shadow)?;
        evaluations.push(CandidateEvaluation {
            family: c.family(),
            tau: c.tau(),
            calibration: c.calibration.clone(),
            feasible: metrics.meets(alpha, floor),
            shadow: metrics,
        });
    }

    let mut best: Option<usize> = None;
    for (i, e) in evaluations.iter().enumerate().filter(|(_, e)| e.feasible) {
        let Some(b) = best else {
            best = Some(i);
            continue;
        };
        let cur = &evaluations[b];
        let key = |e: &CandidateEvaluation| {
            (
                e.shadow.coverage,
                e.family == PipelineFamily::Global,
                e.tau.unwrap_or(f64::INFINITY),
            )
        };
        let (cov, global, tau) = key(e);
        let (bcov, bglobal, btau) = key(cur);
        let better = cov > bcov || (cov == bcov && (global && !bglobal || (global == bglobal && tau > btau)));
        if better {
            best = Some(i);
        }
    }

    let verdict = match best {
        Some(i) => GateVerdict::Promoted {
            shadow: evaluations[i].shadow.clone(),
            candidate: candidates.into_iter().nth(i).expect("index in range"),
        },
        None => {
            let all_below_floor = evaluations.iter().all(|e| e.shadow.coverage < floor);
            GateVerdict::Refused {
                reason: if all_below_floor {
                    RefusalReason::BelowCoverageFloor
                } else {
                    RefusalReason::NoFeasibleTau
                },
            }
        }
    };
    Ok(GateDecision {
        alpha,
        floor,
        verdict,
        evaluations,
    })
}
