//! Gaussian-cluster worlds with a noisy teacher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::squared_distance;
use crate::trace_store::{LabelDictionary, Trace, TraceBuffer};

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("embedding dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("need at least one day")]
    NoDays,
    #[error("need at least one trace per day")]
    EmptyDay,
    #[error("separation must be finite and >= 0, got {0}")]
    InvalidSeparation(f64),
    #[error("teacher noise must lie in [0, 1), got {0}")]
    InvalidNoise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of classes.
    pub k: usize,
    /// Embedding dimension.
    pub d: usize,
    /// Minimum centroid spacing, in within-cluster standard deviations.
    pub separation: f64,
    /// Probability that a teacher label is flipped to another class.
    pub noise: f64,
    pub n_per_day: usize,
    pub days: u32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.k < 2 {
            return Err(SpecError::TooFewClasses(self.k));
        }
        if self.d < 2 {
            return Err(SpecError::DimensionTooSmall(self.d));
        }
        if self.days < 1 {
            return Err(SpecError::NoDays);
        }
        if self.n_per_day < 1 {
            return Err(SpecError::EmptyDay);
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(SpecError::InvalidSeparation(self.separation));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(SpecError::InvalidNoise(self.noise));
        }
        Ok(())
    }

    /// Total traces over all days.
    pub fn volume(&self) -> usize {
        self.n_per_day * self.days as usize
    }

    /// Size of the held-out test sample: 30% of the training volume.
    pub fn test_size(&self) -> usize {
        (self.volume() * 3).div_ceil(10)
    }
}

pub fn class_name(k: usize) -> String {
    format!("class_{k:02}")
}

const CENTROID_STREAM: u64 = 0x6365_6e74_726f_6964;
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
const TEST_STREAM: u64 = 0x7465_7374_0000_0000;

const VOCABULARY: [&str; 24] = [
    "account", "balance", "card", "charge", "refund", "transfer", "pending", "limit", "fee", "app", "pin", "cash",
    "payment", "exchange", "rate", "verify", "identity", "top", "up", "declined", "statement", "lost", "new", "why",
];

/// A fixed set of cluster centroids plus the sampling rules.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub centroids: Vec<Vec<f64>>,
    labels: LabelDictionary,
}

impl SyntheticWorld {
    /// Places `k` centroids in random directions at a radius equal to the
    /// separation, rejecting any closer than `separation` to an accepted one.
    /// After 1,000 consecutive rejections the radius grows by 10%.
    pub fn new(spec: SyntheticSpec) -> Result<Self, SpecError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ CENTROID_STREAM);
        let s = spec.separation;
        let mut radius = s;
        let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(spec.k);
        let mut rejections = 0;
        while centroids.len() < spec.k {
            let dir: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let c: Vec<f64> = dir.iter().map(|v| v / norm * radius).collect();
            if centroids.iter().all(|o| squared_distance(o, &c).sqrt() >= s) {
                centroids.push(c);
                rejections = 0;
            } else {
                rejections += 1;
                if rejections >= 1000 {
                    radius *= 1.1;
                    rejections = 0;
                }
            }
        }
        Ok(Self {
            spec,
            centroids,
            labels: LabelDictionary::from_names((0..spec.k).map(class_name)),
        })
    }

    pub fn labels(&self) -> &LabelDictionary {
        &self.labels
    }

    fn sample(&self, rng: &mut ChaCha8Rng, id: String, day: u32) -> Trace {
        let k = self.spec.k;
        let gt = rng.random_range(0..k);
        let embedding = self.centroids[gt]
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                c + z
            })
            .collect::<Vec<f64>>();
        let teacher = if rng.random::<f64>() < self.spec.noise {
            let other = rng.random_range(0..k - 1);
            if other >= gt {
                other + 1
            } else {
                other
            }
        } else {
            gt
        };
        let words = rng.random_range(3..=18);
        let mut text = format!("[{}]", class_name(gt));
        for _ in 0..words {
            text.push(' ');
            text.push_str(VOCABULARY[rng.random_range(0..VOCABULARY.len())]);
        }
        Trace {
            id,
            text: Some(text),
            embedding,
            teacher_label: teacher,
            day,
            ground_truth: Some(gt),
        }
    }

    /// The training stream: `n_per_day` traces for each day `1..=days`.
    pub fn training_buffer(&self) -> TraceBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ TRAIN_STREAM);
        let mut traces = Vec::with_capacity(self.spec.volume());
        for day in 1..=self.spec.days {
            for i in 0..self.spec.n_per_day {
                traces.push(self.sample(&mut rng, format!("d{day}-{i:06}"), day));
            }
        }
        let mut buffer = TraceBuffer::with_labels(self.labels.clone());
        buffer.append(traces).expect("generated traces are well formed");
        buffer
    }

    /// A fresh held-out sample from the same clusters, tagged with the last day.
    pub fn test_buffer(&self) -> TraceBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ TEST_STREAM);
        let traces = (0..self.spec.test_size())
            .map(|i| self.sample(&mut rng, format!("test-{i:06}"), self.spec.days))
            .collect();
        let mut buffer = TraceBuffer::with_labels(self.labels.clone());
        buffer.append(traces).expect("generated traces are well formed");
        buffer
    }
}

/// Training stream of the world described by `spec`, with ground truth.
pub fn generate_synthetic(spec: SyntheticSpec) -> Result<TraceBuffer, SpecError> {
    Ok(SyntheticWorld::new(spec)?.training_buffer())
}
