//! Library outputs checked against independent brute-force oracles.

mod common;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{alpha, brute_macro_f1, brute_tau, sign_model, texted, trace};
use deferral_core::acceptor::{confidence_features, fit_acceptor, ConfidenceFeatures};
use deferral_core::artifacts::{representative_cards, RoutedExample};
use deferral_core::bench::{confidence_threshold, SyntheticSpec, SyntheticWorld};
use deferral_core::gatekeeper::{build_l2d_candidate, calibrate_tau, TauCalibration};
use deferral_core::router::{classify, route, ActivePipeline, CachedOracle, LiveInput, RoutingState};
use deferral_core::surrogate::objective::{cross_entropy, cross_entropy_gradient};
use deferral_core::surrogate::{fit_mlp, fit_multinomial_lr, macro_f1, ProbVector, TrainConfig};
use deferral_core::trace_store::{assign_split, LabelDictionary, Split, SplitFractions, Trace, TraceBuffer, TraceRecord};

#[test]
fn calibrate_tau_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        // Coarse score grid forces plenty of ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 19.0).collect();
        let p = rng.random::<f64>();
        let agree: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p).collect();
        let a = rng.random_range(0.5..=1.0);
        assert_eq!(calibrate_tau(&scores, &agree, alpha(a)), brute_tau(&scores, &agree, a));
    }
}

#[test]
fn calibrate_tau_three_point_example() {
    let got = calibrate_tau(&[0.9, 0.8, 0.2], &[true, true, false], alpha(0.95)).unwrap();
    assert_eq!(got, brute_tau(&[0.9, 0.8, 0.2], &[true, true, false], 0.95).unwrap());
    assert_eq!(got.tau, 0.8);
    assert_eq!(got.ta, 1.0);
    assert!((got.coverage - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn baseline_threshold_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for trial in 0..200 {
        let probs: Vec<f64> = (0..30).map(|_| 0.3 + 0.7 * rng.random::<f64>()).collect();
        let agree: Vec<bool> = probs.iter().map(|p| rng.random::<f64>() < *p).collect();
        let a = [0.6, 0.8, 0.9, 0.95][trial % 4];
        let expected = brute_tau(&probs, &agree, a)
            .filter(|c| c.coverage >= 0.05)
            .map(|c| if c.coverage == 1.0 { TauCalibration { tau: 0.0, ..c } } else { c });
        assert_eq!(confidence_threshold(&probs, &agree, alpha(a), 0.05), expected);
    }
}

fn lr_instance() -> (Vec<f64>, Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (k, d) = (3, 4);
    let params: Vec<f64> = (0..k * d + k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ys = vec![0, 1, 2, 1, 0];
    (params, xs, ys)
}

#[test]
fn lr_gradient_matches_central_differences() {
    let (params, xs, ys) = lr_instance();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    for l2 in [0.0, 1e-4, 0.1] {
        let g = cross_entropy_gradient(&params, 3, 4, &refs, &ys, l2);
        let h = 1e-6;
        for j in 0..params.len() {
            let mut up = params.clone();
            let mut down = params.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (cross_entropy(&up, 3, 4, &refs, &ys, l2) - cross_entropy(&down, 3, 4, &refs, &ys, l2)) / (2.0 * h);
            let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "param {j}: analytic {} vs numeric {fd} (rel {rel})", g[j]);
        }
    }
}

#[test]
fn macro_f1_worked_example() {
    let dict = LabelDictionary::from_names(["A", "B"]);
    let got = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], &dict).unwrap();
    // A: 2/3, B: 4/5
    assert!((got - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    assert!((got - 0.7333).abs() < 1e-4);
}

#[test]
fn macro_f1_matches_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let k = rng.random_range(2..=6);
        let n = rng.random_range(1..=40);
        let dict = LabelDictionary::from_names((0..k).map(|i| format!("c{i}")));
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let reference: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let got = macro_f1(&pred, &reference, &dict).unwrap();
        assert!((got - brute_macro_f1(&pred, &reference, k)).abs() <= 1e-12);
    }
}

fn three_sigma(n: usize, p: f64) -> f64 {
    3.0 * (n as f64 * p * (1.0 - p)).sqrt()
}

#[test]
fn split_bucket_counts_are_binomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fractions = SplitFractions::default();
    let n = 10_000;
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    for _ in 0..n {
        let id = format!("{:016x}", rng.random::<u64>());
        *counts.entry(assign_split(&id, &fractions)).or_default() += 1;
    }
    for split in Split::ALL {
        let p = fractions.get(split);
        let expected = n as f64 * p;
        let got = counts.get(&split).copied().unwrap_or(0) as f64;
        assert!((got - expected).abs() <= three_sigma(n, p), "{split:?}: {got} vs {expected}");
    }
}

#[test]
fn train_split_of_banking_sized_buffer() {
    let mut buffer = TraceBuffer::new();
    let records: Vec<TraceRecord> = (0..10_003)
        .map(|i| TraceRecord {
            id: format!("banking-{i}"),
            text: None,
            embedding: vec![0.0],
            teacher_label: "x".into(),
            day: 1,
            ground_truth: None,
        })
        .collect();
    buffer.ingest(records).unwrap();
    let train = buffer.traces_for(Split::Train, &SplitFractions::default()).len() as f64;
    assert!((train - 7002.1).abs() <= three_sigma(10_003, 0.7), "train size {train}");
}

/// Best accuracy of any line `w . x >= c` labelling one side as class 1,
/// over a dense grid of directions and every threshold between sorted
/// projections.
fn best_linear_accuracy(points: &[(f64, f64)], labels: &[usize]) -> f64 {
    let n = points.len();
    let mut best = 0usize;
    for step in 0..3600 {
        let theta = step as f64 * std::f64::consts::PI / 1800.0;
        let (c, s) = (theta.cos(), theta.sin());
        let mut proj: Vec<(f64, usize)> = points.iter().zip(labels).map(|((x, y), l)| (c * x + s * y, *l)).collect();
        proj.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ones_total = labels.iter().filter(|l| **l == 1).count();
        // Everything on the "class 1" side, then move points across one at a time.
        let mut ones_above = ones_total;
        let mut zeros_below = 0;
        best = best.max(ones_above + zeros_below).max(n - ones_above - zeros_below);
        for (_, l) in &proj {
            if *l == 1 {
                ones_above -= 1;
            } else {
                zeros_below += 1;
            }
            let acc = ones_above + zeros_below;
            best = best.max(acc).max(n - acc);
        }
    }
    best as f64 / n as f64
}

fn xor_traces() -> (Vec<Trace>, Vec<(f64, f64)>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let centers = [((1.0, 1.0), 0), ((-1.0, -1.0), 0), ((1.0, -1.0), 1), ((-1.0, 1.0), 1)];
    let mut traces = Vec::new();
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (c, ((cx, cy), label)) in centers.iter().enumerate() {
        for i in 0..50 {
            let x = cx + rng.random_range(-0.15..0.15);
            let y = cy + rng.random_range(-0.15..0.15);
            traces.push(trace(&format!("x{c}-{i}"), vec![x, y], *label));
            pts.push((x, y));
            labels.push(*label);
        }
    }
    (traces, pts, labels)
}

fn accuracy(model: &deferral_core::surrogate::SurrogateModel, traces: &[&Trace]) -> f64 {
    traces.iter().filter(|t| model.predict(&t.embedding).unwrap() == t.teacher_label).count() as f64 / traces.len() as f64
}

#[test]
fn mlp_solves_xor_where_linear_models_cannot() {
    let (traces, pts, labels) = xor_traces();
    let linear_ceiling = best_linear_accuracy(&pts, &labels);
    assert!(linear_ceiling <= 0.75, "a line reaches {linear_ceiling}");

    let refs: Vec<&Trace> = traces.iter().collect();
    let dict = LabelDictionary::from_names(["even", "odd"]);
    let cfg = TrainConfig::default();
    let mlp = fit_mlp(&refs, &dict, &cfg).unwrap();
    assert!(accuracy(&mlp, &refs) > 0.95);
    let lr = fit_multinomial_lr(&refs, &dict, &cfg).unwrap();
    assert!(accuracy(&lr, &refs) <= linear_ceiling);
}

#[test]
fn narrow_mlp_keeps_up_on_separable_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let traces: Vec<Trace> = (0..200)
        .map(|i| {
            let label = i % 2;
            let cx = if label == 0 { -2.0 } else { 2.0 };
            trace(&format!("s{i}"), vec![cx + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], label)
        })
        .collect();
    let refs: Vec<&Trace> = traces.iter().collect();
    let dict = LabelDictionary::from_names(["l", "r"]);
    let lr = fit_multinomial_lr(&refs, &dict, &TrainConfig::default()).unwrap();
    let h1 = fit_mlp(&refs, &dict, &TrainConfig { hidden_width: 1, ..TrainConfig::default() }).unwrap();
    assert!(accuracy(&h1, &refs) >= accuracy(&lr, &refs) - 0.05);
}

#[test]
fn representative_card_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for round in 0..20 {
        let traces: Vec<Trace> = (0..20)
            .map(|i| texted(&format!("r{round}-{i:02}"), "t", (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(), 0))
            .collect();
        let routed: Vec<RoutedExample> = traces
            .iter()
            .map(|t| RoutedExample {
                trace: t,
                handled: true,
                score: 1.0,
                surrogate_label: Some(0),
            })
            .collect();
        let cards = representative_cards(&routed, &LabelDictionary::from_names(["a"]));
        assert_eq!(cards.len(), 1);

        let mut centroid = [0.0; 3];
        for t in &traces {
            for j in 0..3 {
                centroid[j] += t.embedding[j] / 20.0;
            }
        }
        let best = traces
            .iter()
            .min_by(|a, b| {
                let da: f64 = a.embedding.iter().zip(centroid).map(|(x, c)| (x - c).powi(2)).sum();
                let db: f64 = b.embedding.iter().zip(centroid).map(|(x, c)| (x - c).powi(2)).sum();
                da.total_cmp(&db).then_with(|| a.id.cmp(&b.id))
            })
            .unwrap();
        assert_eq!(cards[0].trace_id, best.id);
    }
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if *li && !*lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn random_binary_features(rng: &mut ChaCha8Rng) -> ConfidenceFeatures {
    let p = rng.random_range(0.5..1.0);
    confidence_features(&ProbVector::new(vec![p, 1.0 - p]).unwrap()).unwrap()
}

#[test]
fn acceptor_learns_margin_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train: Vec<ConfidenceFeatures> = (0..600).map(|_| random_binary_features(&mut rng)).collect();
    let agree: Vec<bool> = train.iter().map(|f| f.margin > 0.5).collect();
    let model = fit_acceptor(&train, &agree, &TrainConfig::default()).unwrap();

    let held: Vec<ConfidenceFeatures> = (0..300).map(|_| random_binary_features(&mut rng)).collect();
    let labels: Vec<bool> = held.iter().map(|f| f.margin > 0.5).collect();
    let scores: Vec<f64> = held.iter().map(|f| model.score(f)).collect();
    assert!(brute_auc(&scores, &labels) >= 0.99);

    let again = fit_acceptor(&train, &agree, &TrainConfig::default()).unwrap();
    assert_eq!(model, again);
}

#[test]
fn label_randomized_task_has_no_feasible_tau() {
    // Agreement bits are Bernoulli(1/3): a three-class surrogate guessing
    // against independent teacher labels.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let calibration: Vec<Trace> = (0..300)
        .map(|i| {
            let x: f64 = rng.random_range(-3.0..3.0);
            let predicted = usize::from(x > 0.0);
            let agree = rng.random::<f64>() < 1.0 / 3.0;
            let teacher = if agree { predicted } else { 1 - predicted };
            trace(&format!("c{i}"), vec![x], teacher)
        })
        .collect();
    let refs: Vec<&Trace> = calibration.iter().collect();
    let scores: Vec<f64> = refs.iter().map(|t| common::score_at(t.embedding[0])).collect();
    let agreement: Vec<bool> = refs.iter().map(|t| usize::from(t.embedding[0] > 0.0) == t.teacher_label).collect();
    assert_eq!(brute_tau(&scores, &agreement, 0.85), None);
    assert!(build_l2d_candidate(sign_model(), common::margin_acceptor(), &refs, alpha(0.85)).unwrap().is_none());
}

#[test]
fn synthetic_flip_rate_is_binomial() {
    let spec = SyntheticSpec {
        k: 5,
        d: 4,
        separation: 3.0,
        noise: 0.05,
        n_per_day: 10_000,
        days: 1,
        seed: 9,
    };
    let buffer = SyntheticWorld::new(spec).unwrap().training_buffer();
    let flipped = buffer.traces().iter().filter(|t| Some(t.teacher_label) != t.ground_truth).count() as f64;
    assert!((flipped - 500.0).abs() <= three_sigma(10_000, 0.05), "flipped {flipped}");
}

#[test]
fn zero_separation_world_is_unlearnable() {
    let spec = SyntheticSpec {
        k: 3,
        d: 8,
        separation: 0.0,
        noise: 0.0,
        n_per_day: 3000,
        days: 1,
        seed: 10,
    };
    let world = SyntheticWorld::new(spec).unwrap();
    let buffer = world.training_buffer();
    let test = world.test_buffer();
    let refs: Vec<&Trace> = buffer.traces().iter().collect();
    let model = fit_multinomial_lr(&refs, buffer.labels(), &TrainConfig::default()).unwrap();
    let test_refs: Vec<&Trace> = test.traces().iter().collect();
    let acc = test_refs.iter().filter(|t| model.predict(&t.embedding).unwrap() == t.ground_truth.unwrap()).count() as f64
        / test_refs.len() as f64;
    // 900 test points: 1/3 +- 3 sigma
    assert!((acc - 1.0 / 3.0).abs() <= 3.0 * (1.0f64 / 3.0 * 2.0 / 3.0 / 900.0).sqrt(), "accuracy {acc}");
}

#[test]
fn deferral_volume_is_binomial() {
    // Handles |x| >= 0.2 with x ~ U(-1, 1): coverage 0.8.
    let state = RoutingState::Active(ActivePipeline {
        pipeline: common::l2d_candidate(0.2),
        version: 1,
        fitted_at_day: 0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let records: Vec<TraceRecord> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| TraceRecord {
            id: format!("live-{i}"),
            text: None,
            embedding: vec![*x],
            teacher_label: if *x > 0.0 { "pos" } else { "neg" }.into(),
            day: 1,
            ground_truth: None,
        })
        .collect();
    let oracle = CachedOracle::from_records(&records);
    let mut buffer = TraceBuffer::with_labels(LabelDictionary::from_names(["neg", "pos"]));
    let mut expected_deferred = 0;
    for (i, x) in xs.iter().enumerate() {
        let input = LiveInput {
            id: format!("live-{i}"),
            embedding: vec![*x],
            text: None,
        };
        let before = buffer.len();
        let decision = route(&state, &input.embedding).unwrap();
        let out = classify(&state, &input, &oracle, &mut buffer, 1).unwrap();
        assert_eq!(out.decision, decision);
        if decision.is_handled() {
            assert_eq!(buffer.len(), before);
        } else {
            expected_deferred += 1;
            assert_eq!(buffer.len(), before + 1);
        }
    }
    assert_eq!(buffer.len(), expected_deferred);
    assert!((buffer.len() as f64 - 200.0).abs() <= three_sigma(1000, 0.2), "deferred {}", buffer.len());
}
