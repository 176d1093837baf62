//! Agreement predictor over four confidence features of the surrogate's
//! probability vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{dot, sigmoid};
use crate::surrogate::optim::{minibatch_descent, Schedule};
use crate::surrogate::{ProbVector, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum AcceptorError {
    #[error("confidence features need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("acceptor training set is empty")]
    EmptyInput,
    #[error("features and agreement labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("acceptor training needs at least 2 examples")]
    TooFewExamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceFeatures {
    pub top1: f64,
    pub top2: f64,
    pub margin: f64,
    pub norm_entropy: f64,
}

impl ConfidenceFeatures {
    pub fn as_array(&self) -> [f64; 4] {
        [self.top1, self.top2, self.margin, self.norm_entropy]
    }
}

/// Top-1, top-2, their margin and entropy normalized by `ln K`.
///
/// Entropy terms are summed in descending-probability order, which makes
/// the result exactly invariant to permutations of `p`.
pub fn confidence_features(p: &ProbVector) -> Result<ConfidenceFeatures, AcceptorError> {
    let k = p.len();
    if k < 2 {
        return Err(AcceptorError::TooFewClasses(k));
    }
    let mut sorted = p.as_slice().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let (top1, top2) = (sorted[0], sorted[1]);
    let entropy: f64 = sorted
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| -v * v.ln())
        .sum();
    Ok(ConfidenceFeatures {
        top1,
        top2,
        margin: top1 - top2,
        norm_entropy: (entropy / (k as f64).ln()).clamp(0.0, 1.0),
    })
}

/// Logistic scorer `a(x) = sigmoid(w . features + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptorModel {
    pub weights: [f64; 4],
    pub bias: f64,
    pub seed: u64,
}

impl AcceptorModel {
    /// Model scoring every input identically.
    pub fn constant(agree: bool, seed: u64) -> Self {
        Self {
            weights: [0.0; 4],
            bias: if agree { 10.0 } else { -10.0 },
            seed,
        }
    }

    pub fn score(&self, features: &ConfidenceFeatures) -> f64 {
        acceptor_score(self, features)
    }
}

pub fn acceptor_score(model: &AcceptorModel, features: &ConfidenceFeatures) -> f64 {
    sigmoid(dot(&model.weights, &features.as_array()) + model.bias)
}

/// Fits the acceptor by mini-batch descent on L2-regularized binary
/// cross-entropy, using the surrogate optimizer settings. Single-outcome
/// training sets yield [`AcceptorModel::constant`].
pub fn fit_acceptor(features: &[ConfidenceFeatures], agreement: &[bool], cfg: &TrainConfig) -> Result<AcceptorModel, AcceptorError> {
    if features.is_empty() {
        return Err(AcceptorError::EmptyInput);
    }
    if features.len() != agreement.len() {
        return Err(AcceptorError::LengthMismatch(features.len(), agreement.len()));
    }
    if features.len() < 2 {
        return Err(AcceptorError::TooFewExamples);
    }
    if agreement.iter().all(|a| *a) || agreement.iter().all(|a| !*a) {
        return Ok(AcceptorModel::constant(agreement[0], cfg.seed));
    }

    let xs: Vec<[f64; 4]> = features.iter().map(ConfidenceFeatures::as_array).collect();
    let ys: Vec<f64> = agreement.iter().map(|a| if *a { 1.0 } else { 0.0 }).collect();
    let l2 = cfg.l2;
    let schedule = Schedule {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    // [w0..w3, b]
    let mut params = [0.0f64; 5];
    minibatch_descent(xs.len(), schedule, &mut params, |batch, p, g| {
        for &i in batch {
            let e = sigmoid(dot(&p[..4], &xs[i]) + p[4]) - ys[i];
            for j in 0..4 {
                g[j] += e * xs[i][j];
            }
            g[4] += e;
        }
        let scale = 1.0 / batch.len() as f64;
        for j in 0..4 {
            g[j] = g[j] * scale + l2 * p[j];
        }
        g[4] *= scale;
    });
    Ok(AcceptorModel {
        weights: [params[0], params[1], params[2], params[3]],
        bias: params[4],
        seed: cfg.seed,
    })
}
