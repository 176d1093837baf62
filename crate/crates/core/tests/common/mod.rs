//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use deferral_core::acceptor::AcceptorModel;
use deferral_core::gatekeeper::{Alpha, EvalMetrics, Gate, PipelineCandidate, TauCalibration};
use deferral_core::surrogate::{Family, Params, SurrogateModel};
use deferral_core::trace_store::{LabelDictionary, LabelId, Trace};

pub fn alpha(v: f64) -> Alpha {
    Alpha::new(v).unwrap()
}

pub fn trace(id: &str, embedding: Vec<f64>, teacher: LabelId) -> Trace {
    Trace {
        id: id.to_owned(),
        text: None,
        embedding,
        teacher_label: teacher,
        day: 0,
        ground_truth: None,
    }
}

pub fn texted(id: &str, text: &str, embedding: Vec<f64>, teacher: LabelId) -> Trace {
    Trace {
        text: Some(text.to_owned()),
        ..trace(id, embedding, teacher)
    }
}

/// Two-class, one-dimensional linear model with logits `(-x, x)`: predicts
/// class 1 for `x > 0` and its top-1/top-2 margin is `|tanh(x)|`.
pub fn sign_model() -> Arc<SurrogateModel> {
    Arc::new(SurrogateModel {
        family: Family::MultinomialLr,
        dim: 1,
        labels: LabelDictionary::from_names(["neg", "pos"]),
        seed: 0,
        params: Params::Linear {
            packed: vec![-1.0, 1.0, 0.0, 0.0],
        },
    })
}

/// Acceptor scoring `sigmoid(8 * margin - 4)`.
pub fn margin_acceptor() -> AcceptorModel {
    AcceptorModel {
        weights: [0.0, 0.0, 8.0, 0.0],
        bias: -4.0,
        seed: 0,
    }
}

/// Score [`margin_acceptor`] assigns to embedding `x` under [`sign_model`].
pub fn score_at(x: f64) -> f64 {
    let z = 8.0 * x.tanh().abs() - 4.0;
    1.0 / (1.0 + (-z).exp())
}

fn blank_metrics() -> EvalMetrics {
    EvalMetrics {
        n: 0,
        handled: 0,
        coverage: 0.0,
        ta_on_handled: None,
        gt_accuracy: None,
    }
}

pub fn global_candidate() -> PipelineCandidate {
    PipelineCandidate {
        surrogate: sign_model(),
        gate: Gate::Global,
        calibration: blank_metrics(),
    }
}

/// L2D candidate over [`sign_model`] that handles inputs with `|x| >= cut`.
pub fn l2d_candidate(cut: f64) -> PipelineCandidate {
    PipelineCandidate {
        surrogate: sign_model(),
        gate: Gate::L2d {
            acceptor: margin_acceptor(),
            tau: score_at(cut),
        },
        calibration: blank_metrics(),
    }
}

/// Exhaustive threshold search: every unique score is tried independently.
pub fn brute_tau(scores: &[f64], agree: &[bool], a: f64) -> Option<TauCalibration> {
    let mut uniq = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut best: Option<TauCalibration> = None;
    for &tau in &uniq {
        let handled: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= tau).collect();
        let hits = handled.iter().filter(|&&i| agree[i]).count();
        let ta = hits as f64 / handled.len() as f64;
        let coverage = handled.len() as f64 / scores.len() as f64;
        if ta < a {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => coverage > b.coverage || (coverage == b.coverage && tau > b.tau),
        };
        if better {
            best = Some(TauCalibration { tau, coverage, ta });
        }
    }
    best
}

/// Per-class F1 from an explicit confusion matrix, averaged over classes
/// with reference support.
pub fn brute_macro_f1(pred: &[usize], reference: &[usize], k: usize) -> f64 {
    let mut m = vec![vec![0usize; k]; k];
    for (p, r) in pred.iter().zip(reference) {
        m[*r][*p] += 1;
    }
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..k {
        let support: usize = m[c].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = m[c][c] as f64;
        let predicted: usize = (0..k).map(|r| m[r][c]).sum();
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (predicted as f64 + support as f64) };
        total += f1;
        classes += 1;
    }
    total / classes as f64
}
