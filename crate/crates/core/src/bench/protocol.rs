//! Day-by-day protocol runner, alpha sweep, and the max-probability
//! baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gatekeeper::{calibrate_tau, evaluate_pipeline, Alpha, EvalMetrics, GateError, GateVerdict, PipelineFamily, RefusalReason, TauCalibration};
use crate::router::{complete_refit, fit, train_pool, Refit, RouterConfig, RouterError, RoutingState, TrainingOutcome};
use crate::surrogate::{fit_multinomial_lr, ModelError, SurrogateModel};
use crate::trace_store::{Split, StoreError, Trace, TraceBuffer};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("protocol needs {needed} day tags, buffer has {found}")]
    MissingDay { needed: usize, found: usize },
    #[error("test set is empty")]
    EmptyTest,
    #[error("alpha list is empty")]
    NoAlphas,
    #[error("baseline needs at least 2 teacher classes in the training split")]
    SingleClass,
    #[error("calibration split is empty")]
    EmptyCalibration,
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One day of the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day: u32,
    pub traces_so_far: usize,
    pub version: u64,
    pub promoted: bool,
    pub family: Option<PipelineFamily>,
    pub tau: Option<f64>,
    pub refusal: Option<RefusalReason>,
    pub calibration_coverage: Option<f64>,
    pub calibration_ta: Option<f64>,
    pub shadow_coverage: Option<f64>,
    pub shadow_ta: Option<f64>,
}

impl DayRecord {
    fn from_refit(day: u32, refit: &Refit) -> Self {
        let mut rec = DayRecord {
            day,
            traces_so_far: refit.buffer_len,
            version: refit.state.version(),
            promoted: false,
            family: None,
            tau: None,
            refusal: None,
            calibration_coverage: None,
            calibration_ta: None,
            shadow_coverage: None,
            shadow_ta: None,
        };
        match &refit.decision.verdict {
            GateVerdict::Promoted { candidate, shadow } => {
                rec.promoted = true;
                rec.family = Some(candidate.family());
                rec.tau = candidate.tau();
                rec.calibration_coverage = Some(candidate.calibration.coverage);
                rec.calibration_ta = candidate.calibration.ta_on_handled;
                rec.shadow_coverage = Some(shadow.coverage);
                rec.shadow_ta = shadow.ta_on_handled;
            }
            GateVerdict::Refused { reason } => rec.refusal = Some(*reason),
        }
        rec
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub alpha: Alpha,
    pub days: Vec<DayRecord>,
    /// Final routing state evaluated on the held-out test set.
    pub test: EvalMetrics,
    pub final_state: RoutingState,
    #[serde(skip)]
    pub final_refit: Option<Refit>,
}

/// Metrics of a routing state on labeled data. A teacher-only state handles
/// nothing and serves every input with the teacher's label.
pub fn evaluate_state(state: &RoutingState, data: &[&Trace]) -> Result<EvalMetrics, ProtocolError> {
    if data.is_empty() {
        return Err(ProtocolError::EmptyTest);
    }
    match state.pipeline() {
        Some(p) => Ok(evaluate_pipeline(p, data)?),
        None => {
            let with_gt: Vec<_> = data.iter().filter_map(|t| t.ground_truth.map(|g| g == t.teacher_label)).collect();
            Ok(EvalMetrics {
                n: data.len(),
                handled: 0,
                coverage: 0.0,
                ta_on_handled: None,
                gt_accuracy: (!with_gt.is_empty()).then(|| with_gt.iter().filter(|h| **h).count() as f64 / with_gt.len() as f64),
            })
        }
    }
}

/// The first `days` day tags of `buffer`, in order.
fn protocol_days(buffer: &TraceBuffer, days: usize) -> Result<Vec<u32>, ProtocolError> {
    let tags: Vec<u32> = buffer.day_counts().keys().copied().collect();
    if days == 0 || tags.len() < days {
        return Err(ProtocolError::MissingDay {
            needed: days,
            found: tags.len(),
        });
    }
    Ok(tags[..days].to_vec())
}

struct DayStream<'a> {
    source: &'a TraceBuffer,
    tags: Vec<u32>,
    buffer: TraceBuffer,
}

impl<'a> DayStream<'a> {
    fn new(source: &'a TraceBuffer, days: usize) -> Result<Self, ProtocolError> {
        Ok(Self {
            source,
            tags: protocol_days(source, days)?,
            buffer: TraceBuffer::with_labels(source.labels().clone()),
        })
    }

    /// Appends day `i`'s batch to the growing buffer.
    fn advance(&mut self, i: usize) -> Result<u32, ProtocolError> {
        let day = self.tags[i];
        let batch: Vec<Trace> = self.source.traces().iter().filter(|t| t.day == day).cloned().collect();
        self.buffer.append(batch)?;
        Ok(day)
    }
}

/// Fits on the first day's batch, then merges each following day's batch
/// and refits from scratch. The final state is evaluated on `test`.
pub fn run_protocol(buffer: &TraceBuffer, test: &TraceBuffer, days: usize, cfg: &RouterConfig) -> Result<ProtocolResult, ProtocolError> {
    if test.is_empty() {
        return Err(ProtocolError::EmptyTest);
    }
    let mut stream = DayStream::new(buffer, days)?;
    let mut state = RoutingState::default();
    let mut records = Vec::with_capacity(days);
    let mut last = None;
    for i in 0..days {
        let day = stream.advance(i)?;
        let refit = fit(&stream.buffer, &state, cfg)?;
        records.push(DayRecord::from_refit(day, &refit));
        state = refit.state.clone();
        last = Some(refit);
    }
    let test_refs: Vec<&Trace> = test.traces().iter().collect();
    Ok(ProtocolResult {
        alpha: cfg.alpha,
        days: records,
        test: evaluate_state(&state, &test_refs)?,
        final_state: state,
        final_refit: last,
    })
}

/// Baseline coverage and TA next to the pipeline's, for one alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: Alpha,
    pub cov: f64,
    pub ta: Option<f64>,
    pub gt_acc: Option<f64>,
    pub baseline_cov: f64,
    pub baseline_ta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl SweepResult {
    /// Comma-separated table with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,cov,ta,gt_acc,baseline_cov,baseline_ta\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{:.6},{}",
                r.alpha,
                r.cov,
                opt(r.ta),
                opt(r.gt_acc),
                r.baseline_cov,
                opt(r.baseline_ta)
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }

    /// Coverage and TA per alpha in percent / three-decimal form.
    pub fn to_table(&self) -> String {
        let mut s = String::from("| alpha | Cov | TA | GT acc | Baseline Cov | Baseline TA |\n|---:|---:|---:|---:|---:|---:|\n");
        let pct = |v: f64| format!("{:.1}%", v * 100.0);
        let ta = |v: Option<f64>| v.map_or_else(|| "--".to_owned(), |x| format!("{x:.3}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {:.2} | {} | {} | {} | {} | {} |",
                r.alpha.value(),
                pct(r.cov),
                ta(r.ta),
                ta(r.gt_acc),
                pct(r.baseline_cov),
                ta(r.baseline_ta)
            );
        }
        s
    }
}

/// Sweep rows plus the full protocol record of every alpha.
#[derive(Debug, Clone)]
pub struct DetailedSweep {
    pub result: SweepResult,
    pub protocols: Vec<ProtocolResult>,
}

/// Runs the protocol once per alpha with identical data, splits and seed.
///
/// Pool training does not depend on alpha, so each day's pool is trained
/// once and gated separately for every alpha. The outcome is identical to
/// independent runs.
pub fn run_alpha_sweep(buffer: &TraceBuffer, test: &TraceBuffer, days: usize, alphas: &[Alpha], cfg: &RouterConfig) -> Result<SweepResult, ProtocolError> {
    Ok(run_alpha_sweep_detailed(buffer, test, days, alphas, cfg)?.result)
}

pub fn run_alpha_sweep_detailed(
    buffer: &TraceBuffer,
    test: &TraceBuffer,
    days: usize,
    alphas: &[Alpha],
    cfg: &RouterConfig,
) -> Result<DetailedSweep, ProtocolError> {
    if alphas.is_empty() {
        return Err(ProtocolError::NoAlphas);
    }
    if test.is_empty() {
        return Err(ProtocolError::EmptyTest);
    }
    let mut stream = DayStream::new(buffer, days)?;
    let mut states = vec![RoutingState::default(); alphas.len()];
    let mut records: Vec<Vec<DayRecord>> = vec![Vec::with_capacity(days); alphas.len()];
    let mut last: Vec<Option<Refit>> = vec![None; alphas.len()];
    for i in 0..days {
        let day = stream.advance(i)?;
        let outcome: TrainingOutcome = train_pool(&stream.buffer, &cfg.fractions, &cfg.train)?;
        for (a, alpha) in alphas.iter().enumerate() {
            let refit = complete_refit(&outcome, &stream.buffer, &states[a], *alpha, cfg)?;
            records[a].push(DayRecord::from_refit(day, &refit));
            states[a] = refit.state.clone();
            last[a] = Some(refit);
        }
    }

    let test_refs: Vec<&Trace> = test.traces().iter().collect();
    let baseline = BaselineModel::fit(&stream.buffer, cfg)?;
    let mut rows = Vec::with_capacity(alphas.len());
    let mut protocols = Vec::with_capacity(alphas.len());
    for (a, alpha) in alphas.iter().enumerate() {
        let metrics = evaluate_state(&states[a], &test_refs)?;
        let base = baseline.evaluate(*alpha, cfg.floor, &test_refs)?;
        rows.push(SweepRow {
            alpha: *alpha,
            cov: metrics.coverage,
            ta: metrics.ta_on_handled,
            gt_acc: metrics.gt_accuracy,
            baseline_cov: base.coverage,
            baseline_ta: base.ta_on_handled,
        });
        protocols.push(ProtocolResult {
            alpha: *alpha,
            days: std::mem::take(&mut records[a]),
            test: metrics,
            final_state: states[a].clone(),
            final_refit: last[a].take(),
        });
    }
    Ok(DetailedSweep {
        result: SweepResult { rows },
        protocols,
    })
}

/// Max-probability threshold with maximal calibration coverage at
/// `TA >= alpha`. Thresholds below the coverage floor count as no
/// threshold. A threshold covering all of Calibration is lowered to 0,
/// accepting every input.
pub fn confidence_threshold(max_probs: &[f64], agreement: &[bool], alpha: Alpha, floor: f64) -> Option<TauCalibration> {
    calibrate_tau(max_probs, agreement, alpha)
        .filter(|c| c.coverage >= floor)
        .map(|c| if c.coverage == 1.0 { TauCalibration { tau: 0.0, ..c } } else { c })
}

/// A MultinomialLR trained on the whole buffer's Train split at once, with
/// its Calibration split for the threshold sweep.
pub struct BaselineModel {
    pub model: SurrogateModel,
    max_probs: Vec<f64>,
    agreement: Vec<bool>,
}

impl BaselineModel {
    pub fn fit(buffer: &TraceBuffer, cfg: &RouterConfig) -> Result<Self, ProtocolError> {
        let train = buffer.traces_for(Split::Train, &cfg.fractions);
        let distinct: std::collections::BTreeSet<_> = train.iter().map(|t| t.teacher_label).collect();
        if distinct.len() < 2 {
            return Err(ProtocolError::SingleClass);
        }
        let model = fit_multinomial_lr(&train, buffer.labels(), &cfg.train)?;
        let calibration = buffer.traces_for(Split::Calibration, &cfg.fractions);
        if calibration.is_empty() {
            return Err(ProtocolError::EmptyCalibration);
        }
        let mut max_probs = Vec::with_capacity(calibration.len());
        let mut agreement = Vec::with_capacity(calibration.len());
        for t in &calibration {
            let p = model.predict_proba(&t.embedding)?;
            max_probs.push(p.max());
            agreement.push(p.argmax() == t.teacher_label);
        }
        Ok(Self { model, max_probs, agreement })
    }

    /// See [`confidence_threshold`].
    pub fn threshold(&self, alpha: Alpha, floor: f64) -> Option<TauCalibration> {
        confidence_threshold(&self.max_probs, &self.agreement, alpha, floor)
    }

    /// Test metrics under the calibrated threshold: handled when the
    /// surrogate's max probability reaches it, otherwise served by the
    /// teacher.
    pub fn evaluate(&self, alpha: Alpha, floor: f64, test: &[&Trace]) -> Result<EvalMetrics, ProtocolError> {
        if test.is_empty() {
            return Err(ProtocolError::EmptyTest);
        }
        let tau = self.threshold(alpha, floor).map(|c| c.tau);
        let (mut handled, mut agree, mut gt_n, mut gt_hits) = (0usize, 0usize, 0usize, 0usize);
        for t in test {
            let p = self.model.predict_proba(&t.embedding)?;
            let served = match tau {
                Some(tau) if p.max() >= tau => {
                    handled += 1;
                    agree += usize::from(p.argmax() == t.teacher_label);
                    p.argmax()
                }
                _ => t.teacher_label,
            };
            if let Some(gt) = t.ground_truth {
                gt_n += 1;
                gt_hits += usize::from(served == gt);
            }
        }
        Ok(EvalMetrics {
            n: test.len(),
            handled,
            coverage: handled as f64 / test.len() as f64,
            ta_on_handled: (handled > 0).then(|| agree as f64 / handled as f64),
            gt_accuracy: (gt_n > 0).then(|| gt_hits as f64 / gt_n as f64),
        })
    }
}

/// Confidence-threshold baseline: one MultinomialLR on all traces, a max-
/// probability threshold swept on Calibration, evaluated on `test`.
pub fn baseline_confidence_threshold(buffer: &TraceBuffer, test: &TraceBuffer, alpha: Alpha, cfg: &RouterConfig) -> Result<EvalMetrics, ProtocolError> {
    let refs: Vec<&Trace> = test.traces().iter().collect();
    BaselineModel::fit(buffer, cfg)?.evaluate(alpha, cfg.floor, &refs)
}
