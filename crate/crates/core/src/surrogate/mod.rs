//! Surrogate classifiers trained on teacher labels.
//!
//! Three families are available: multinomial logistic regression, a
//! one-hidden-layer rectifier MLP, and a nearest-centroid classifier with a
//! softmax over negative distances. [`select_best`] picks the winner by
//! teacher-label macro-F1 on held-out data.

mod linear;
mod metrics;
mod mlp;
pub(crate) mod optim;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{argmax, softmax_in_place, squared_distance};
use crate::trace_store::{LabelDictionary, LabelId, Trace};

pub use metrics::macro_f1;
use optim::{minibatch_descent, Schedule};

/// Loss and gradient of the multinomial logistic objective, exposed for
/// gradient checking.
pub mod objective {
    pub use super::linear::{cross_entropy, cross_entropy_gradient, param_len};
}

/// Loss of the MLP objective over packed parameters.
pub mod mlp_objective {
    pub use super::mlp::{cross_entropy, param_len};
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training set has {0} distinct teacher label(s); at least 2 are required")]
    DegenerateTask(usize),
    #[error("embedding dimension {found} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("probability vector needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no surrogate family is enabled")]
    EmptyPool,
    #[error("malformed model document: {0}")]
    Document(String),
}

/// Class-probability vector: non-negative entries summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::InvalidProbabilities("negative or non-finite entry".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(ModelError::InvalidProbabilities(format!("entries sum to {sum}")));
        }
        Ok(Self(values))
    }

    /// Softmax of `logits`.
    pub fn from_logits(mut logits: Vec<f64>) -> Self {
        softmax_in_place(&mut logits);
        Self(logits)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> LabelId {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Surrogate family. Declaration order is the selection tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MultinomialLr,
    Mlp,
    NearestCentroid,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::MultinomialLr => "lr",
            Family::Mlp => "mlp",
            Family::NearestCentroid => "centroid",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "lr" | "multinomial_lr" => Ok(Family::MultinomialLr),
            "mlp" => Ok(Family::Mlp),
            "centroid" | "nearest_centroid" => Ok(Family::NearestCentroid),
            other => Err(format!("unknown surrogate family `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub multinomial_lr: bool,
    pub mlp: bool,
    pub nearest_centroid: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            multinomial_lr: true,
            mlp: true,
            nearest_centroid: true,
        }
    }
}

impl PoolConfig {
    pub fn only(families: &[Family]) -> Self {
        Self {
            multinomial_lr: families.contains(&Family::MultinomialLr),
            mlp: families.contains(&Family::Mlp),
            nearest_centroid: families.contains(&Family::NearestCentroid),
        }
    }

    pub fn families(&self) -> Vec<Family> {
        let mut out = Vec::new();
        if self.multinomial_lr {
            out.push(Family::MultinomialLr);
        }
        if self.mlp {
            out.push(Family::Mlp);
        }
        if self.nearest_centroid {
            out.push(Family::NearestCentroid);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub centroid_temperature: f64,
    pub pool: PoolConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            epochs: 200,
            learning_rate: 0.1,
            l2: 1e-4,
            batch_size: 256,
            hidden_width: 64,
            centroid_temperature: 1.0,
            pool: PoolConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_owned()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning rate must be > 0");
        }
        if !self.l2.is_finite() || self.l2 < 0.0 {
            return bad("l2 must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if self.hidden_width == 0 {
            return bad("hidden width must be >= 1");
        }
        if !self.centroid_temperature.is_finite() || self.centroid_temperature <= 0.0 {
            return bad("centroid temperature must be > 0");
        }
        Ok(())
    }

    pub(crate) fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Params {
    /// Flat `[W (K x d) | b (K)]`.
    Linear { packed: Vec<f64> },
    /// Flat `[W1 (H x d) | b1 (H) | W2 (K x H) | b2 (K)]`.
    Mlp { hidden: usize, packed: Vec<f64> },
    /// `K x d` centroids; classes without training support have no centroid
    /// and receive probability 0.
    Centroid {
        temperature: f64,
        centroids: Vec<f64>,
        present: Vec<bool>,
    },
}

/// A fitted surrogate. Immutable once built and safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub family: Family,
    pub dim: usize,
    pub labels: LabelDictionary,
    pub seed: u64,
    pub params: Params,
}

impl SurrogateModel {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn logits(&self, embedding: &[f64]) -> Result<Vec<f64>, ModelError> {
        if embedding.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim,
                found: embedding.len(),
            });
        }
        let (k, d) = (self.num_classes(), self.dim);
        let mut out = vec![0.0; k];
        match &self.params {
            Params::Linear { packed } => linear::logits_into(packed, k, d, embedding, &mut out),
            Params::Mlp { hidden, packed } => {
                let mut h = vec![0.0; *hidden];
                mlp::forward(packed, k, d, *hidden, embedding, &mut h, &mut out);
            }
            Params::Centroid {
                temperature,
                centroids,
                present,
            } => {
                for c in 0..k {
                    out[c] = if present[c] {
                        -squared_distance(embedding, &centroids[c * d..(c + 1) * d]).sqrt() / temperature
                    } else {
                        f64::NEG_INFINITY
                    };
                }
            }
        }
        Ok(out)
    }

    pub fn predict_proba(&self, embedding: &[f64]) -> Result<ProbVector, ModelError> {
        self.logits(embedding).map(ProbVector::from_logits)
    }

    /// `f(x)`: the argmax of [`predict_proba`](Self::predict_proba).
    pub fn predict(&self, embedding: &[f64]) -> Result<LabelId, ModelError> {
        Ok(self.predict_proba(embedding)?.argmax())
    }

    /// Mean cross-entropy against teacher labels (no regularizer).
    pub fn mean_cross_entropy(&self, traces: &[&Trace]) -> Result<f64, ModelError> {
        if traces.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mut total = 0.0;
        for t in traces {
            let p = self.predict_proba(&t.embedding)?;
            let py = p.as_slice().get(t.teacher_label).copied().unwrap_or(0.0);
            total -= py.max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / traces.len() as f64)
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let (k, d) = (self.num_classes(), self.dim);
        let ok = match &self.params {
            Params::Linear { packed } => packed.len() == linear::param_len(k, d),
            Params::Mlp { hidden, packed } => *hidden > 0 && packed.len() == mlp::param_len(k, d, *hidden),
            Params::Centroid {
                temperature,
                centroids,
                present,
            } => *temperature > 0.0 && centroids.len() == k * d && present.len() == k && present.iter().any(|p| *p),
        };
        if ok && k >= 2 && d >= 1 {
            Ok(())
        } else {
            Err(ModelError::Document(format!(
                "parameter shapes inconsistent with K={k}, d={d}"
            )))
        }
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    model: SurrogateModel,
}

/// Versioned JSON document for a fitted surrogate. Floats use shortest
/// round-trip decimal encoding, so parsing returns bit-identical parameters.
pub fn model_to_document(model: &SurrogateModel) -> String {
    serde_json::to_string_pretty(&ModelDocument {
        format_version: MODEL_FORMAT_VERSION,
        model: model.clone(),
    })
    .expect("model serializes")
}

pub fn model_from_document(doc: &str) -> Result<SurrogateModel, ModelError> {
    let parsed: ModelDocument = serde_json::from_str(doc).map_err(|e| ModelError::Document(e.to_string()))?;
    if parsed.format_version != MODEL_FORMAT_VERSION {
        return Err(ModelError::Document(format!(
            "unsupported format version {}",
            parsed.format_version
        )));
    }
    parsed.model.check_shapes()?;
    Ok(parsed.model)
}

struct TrainingView<'a> {
    xs: Vec<&'a [f64]>,
    ys: Vec<usize>,
    k: usize,
    d: usize,
}

fn training_view<'a>(train: &[&'a Trace], labels: &LabelDictionary, cfg: &TrainConfig) -> Result<TrainingView<'a>, ModelError> {
    cfg.validate()?;
    let first = train.first().ok_or(ModelError::EmptyTrainingSet)?;
    let d = first.embedding.len();
    let distinct: BTreeSet<LabelId> = train.iter().map(|t| t.teacher_label).collect();
    if distinct.len() < 2 {
        return Err(ModelError::DegenerateTask(distinct.len()));
    }
    let mut xs = Vec::with_capacity(train.len());
    for t in train {
        if t.embedding.len() != d {
            return Err(ModelError::DimensionMismatch {
                expected: d,
                found: t.embedding.len(),
            });
        }
        xs.push(t.embedding.as_slice());
    }
    let k = labels.len().max(distinct.last().map_or(0, |m| m + 1));
    if k != labels.len() {
        return Err(ModelError::InvalidConfig(
            "training labels are not registered in the supplied dictionary".into(),
        ));
    }
    Ok(TrainingView {
        xs,
        ys: train.iter().map(|t| t.teacher_label).collect(),
        k,
        d,
    })
}

/// Multinomial logistic regression by mini-batch gradient descent on the
/// L2-regularized cross-entropy. Parameters start at zero.
pub fn fit_multinomial_lr(train: &[&Trace], labels: &LabelDictionary, cfg: &TrainConfig) -> Result<SurrogateModel, ModelError> {
    let v = training_view(train, labels, cfg)?;
    let mut packed = vec![0.0; linear::param_len(v.k, v.d)];
    minibatch_descent(v.xs.len(), cfg.schedule(), &mut packed, |batch, params, g| {
        linear::batch_gradient(params, v.k, v.d, &v.xs, &v.ys, cfg.l2, batch, g)
    });
    Ok(SurrogateModel {
        family: Family::MultinomialLr,
        dim: v.d,
        labels: labels.clone(),
        seed: cfg.seed,
        params: Params::Linear { packed },
    })
}

pub fn fit_mlp(train: &[&Trace], labels: &LabelDictionary, cfg: &TrainConfig) -> Result<SurrogateModel, ModelError> {
    let v = training_view(train, labels, cfg)?;
    let h = cfg.hidden_width;
    let mut packed = mlp::init(v.k, v.d, h, cfg.seed);
    minibatch_descent(v.xs.len(), cfg.schedule(), &mut packed, |batch, params, g| {
        mlp::batch_gradient(params, v.k, v.d, h, &v.xs, &v.ys, cfg.l2, batch, g)
    });
    Ok(SurrogateModel {
        family: Family::Mlp,
        dim: v.d,
        labels: labels.clone(),
        seed: cfg.seed,
        params: Params::Mlp { hidden: h, packed },
    })
}

pub fn fit_nearest_centroid(train: &[&Trace], labels: &LabelDictionary, cfg: &TrainConfig) -> Result<SurrogateModel, ModelError> {
    let v = training_view(train, labels, cfg)?;
    let mut sums = vec![0.0; v.k * v.d];
    let mut counts = vec![0usize; v.k];
    for (x, &y) in v.xs.iter().zip(&v.ys) {
        counts[y] += 1;
        for (s, xv) in sums[y * v.d..(y + 1) * v.d].iter_mut().zip(x.iter()) {
            *s += xv;
        }
    }
    for c in 0..v.k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            sums[c * v.d..(c + 1) * v.d].iter_mut().for_each(|s| *s /= n);
        }
    }
    Ok(SurrogateModel {
        family: Family::NearestCentroid,
        dim: v.d,
        labels: labels.clone(),
        seed: cfg.seed,
        params: Params::Centroid {
            temperature: cfg.centroid_temperature,
            centroids: sums,
            present: counts.iter().map(|c| *c > 0).collect(),
        },
    })
}

pub fn fit_family(family: Family, train: &[&Trace], labels: &LabelDictionary, cfg: &TrainConfig) -> Result<SurrogateModel, ModelError> {
    match family {
        Family::MultinomialLr => fit_multinomial_lr(train, labels, cfg),
        Family::Mlp => fit_mlp(train, labels, cfg),
        Family::NearestCentroid => fit_nearest_centroid(train, labels, cfg),
    }
}

/// Trains every enabled family, one thread per family. Output order follows
/// [`PoolConfig::families`].
pub fn fit_pool(train: &[&Trace], labels: &LabelDictionary, cfg: &TrainConfig) -> Result<Vec<SurrogateModel>, ModelError> {
    let families = cfg.pool.families();
    if families.is_empty() {
        return Err(ModelError::EmptyPool);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = families
            .iter()
            .map(|&f| s.spawn(move || fit_family(f, train, labels, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("surrogate training thread panicked"))
            .collect()
    })
}

/// Winner of [`select_best`] with every candidate's validation macro-F1.
#[derive(Debug, Clone)]
pub struct Selection<'a> {
    pub index: usize,
    pub model: &'a SurrogateModel,
    pub scores: Vec<f64>,
}

/// Picks the candidate with the highest teacher-label macro-F1 on
/// `validation`. Ties go to the earlier family, then the lower seed, then
/// the earlier position.
pub fn select_best<'a>(candidates: &'a [SurrogateModel], validation: &[&Trace], labels: &LabelDictionary) -> Result<Selection<'a>, ModelError> {
    if candidates.is_empty() || validation.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let reference: Vec<LabelId> = validation.iter().map(|t| t.teacher_label).collect();
    let mut scores = Vec::with_capacity(candidates.len());
    for m in candidates {
        let predicted = validation
            .iter()
            .map(|t| m.predict(&t.embedding))
            .collect::<Result<Vec<_>, _>>()?;
        scores.push(macro_f1(&predicted, &reference, labels)?);
    }
    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (&candidates[i], &candidates[best]);
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && (a.family, a.seed) < (b.family, b.seed));
        if better {
            best = i;
        }
    }
    Ok(Selection {
        index: best,
        model: &candidates[best],
        scores,
    })
}
