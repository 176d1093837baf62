//! Per-refit interpretability artifacts describing the routing partition.
//!
//! Five artifact types are computed over a routed reference set:
//! slice summaries (per label and per length bin), representative example
//! cards, contrastive boundary pairs, temporal deltas against the previous
//! routing state, and disagreement cards grouped by surrogate prediction.
//! Refused verdicts yield a verdict stub and nothing else.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gatekeeper::{Alpha, CandidateEvaluation, EvalMetrics, GateDecision, GateError, GateVerdict, PipelineFamily, RefusalReason};
use crate::math::squared_distance;
use crate::router::RoutingState;
use crate::surrogate::{ModelError, SurrogateModel};
use crate::trace_store::{LabelDictionary, LabelId, Trace};

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("reference set is empty")]
    EmptyReference,
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed report document: {0}")]
    Document(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactConfig {
    /// Maximum number of boundary pairs per report.
    pub boundary_pairs: usize,
    /// Maximum listed items per disagreement group (counts stay exact).
    pub disagreement_cap: usize,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        Self {
            boundary_pairs: 5,
            disagreement_cap: 10,
        }
    }
}

/// One reference trace after routing.
#[derive(Debug, Clone, Copy)]
pub struct RoutedExample<'a> {
    pub trace: &'a Trace,
    pub handled: bool,
    pub score: f64,
    pub surrogate_label: Option<LabelId>,
}

/// Routes every reference trace under `state`.
pub fn route_reference<'a>(state: &RoutingState, reference: &[&'a Trace]) -> Result<Vec<RoutedExample<'a>>, ArtifactError> {
    reference
        .iter()
        .map(|t| match state.pipeline() {
            None => Ok(RoutedExample {
                trace: t,
                handled: false,
                score: 0.0,
                surrogate_label: None,
            }),
            Some(p) => {
                let s = p.score(&t.embedding)?;
                Ok(RoutedExample {
                    trace: t,
                    handled: s.handled,
                    score: s.score,
                    surrogate_label: Some(s.predicted),
                })
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthBin {
    Short,
    Medium,
    Long,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", content = "value", rename_all = "snake_case")]
pub enum SliceKey {
    Label(String),
    Length(LengthBin),
}

impl std::fmt::Display for SliceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SliceKey::Label(l) => f.write_str(l),
            SliceKey::Length(b) => write!(f, "{b:?}").map(|_| ()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub key: SliceKey,
    pub n: usize,
    pub handled: usize,
    pub handled_rate: f64,
    pub ta_on_handled: Option<f64>,
}

/// Character-length tercile edges: short is `len <= short_max`, medium is
/// `len <= medium_max`, long is the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBinEdges {
    pub short_max: usize,
    pub medium_max: usize,
}

impl LengthBinEdges {
    /// Nearest-rank terciles of `lengths`; `None` for an empty slice.
    pub fn terciles(lengths: &[usize]) -> Option<Self> {
        if lengths.is_empty() {
            return None;
        }
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let rank = |num: usize| sorted[(num * n).div_ceil(3).max(1) - 1];
        Some(Self {
            short_max: rank(1),
            medium_max: rank(2),
        })
    }

    pub fn bin(&self, len: usize) -> LengthBin {
        if len <= self.short_max {
            LengthBin::Short
        } else if len <= self.medium_max {
            LengthBin::Medium
        } else {
            LengthBin::Long
        }
    }
}

#[derive(Default)]
struct Tally {
    n: usize,
    handled: usize,
    agree: usize,
}

impl Tally {
    fn add(&mut self, r: &RoutedExample<'_>) {
        self.n += 1;
        if r.handled {
            self.handled += 1;
            self.agree += usize::from(r.surrogate_label == Some(r.trace.teacher_label));
        }
    }

    fn summary(&self, key: SliceKey) -> SliceSummary {
        SliceSummary {
            key,
            n: self.n,
            handled: self.handled,
            handled_rate: self.handled as f64 / self.n as f64,
            ta_on_handled: (self.handled > 0).then(|| self.agree as f64 / self.handled as f64),
        }
    }
}

fn label_name(labels: &LabelDictionary, id: LabelId) -> String {
    labels.name(id).map_or_else(|| format!("#{id}"), str::to_owned)
}

fn char_len(t: &Trace) -> Option<usize> {
    t.text.as_deref().map(|s| s.chars().count())
}

/// One summary per teacher label present (in label-index order), followed
/// by the three length-bin summaries over traces that carry text.
pub fn slice_summaries(routed: &[RoutedExample<'_>], labels: &LabelDictionary) -> (Vec<SliceSummary>, Option<LengthBinEdges>) {
    let mut by_label: BTreeMap<LabelId, Tally> = BTreeMap::new();
    for r in routed {
        by_label.entry(r.trace.teacher_label).or_default().add(r);
    }
    let mut out: Vec<SliceSummary> = by_label
        .iter()
        .map(|(l, t)| t.summary(SliceKey::Label(label_name(labels, *l))))
        .collect();

    let lengths: Vec<usize> = routed.iter().filter_map(|r| char_len(r.trace)).collect();
    let edges = LengthBinEdges::terciles(&lengths);
    if let Some(edges) = edges {
        let mut by_bin: BTreeMap<LengthBin, Tally> = BTreeMap::new();
        for r in routed {
            if let Some(len) = char_len(r.trace) {
                by_bin.entry(edges.bin(len)).or_default().add(r);
            }
        }
        out.extend(by_bin.iter().map(|(b, t)| t.summary(SliceKey::Length(*b))));
    }
    (out, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingGroup {
    Handled,
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleCard {
    pub label: String,
    pub group: RoutingGroup,
    pub trace_id: String,
    pub text: String,
    pub distance_to_centroid: f64,
}

fn nearest_to_centroid<'a>(members: &[&RoutedExample<'a>]) -> (&'a Trace, f64) {
    let d = members[0].trace.embedding.len();
    let mut centroid = vec![0.0; d];
    for m in members {
        for (c, v) in centroid.iter_mut().zip(&m.trace.embedding) {
            *c += v;
        }
    }
    let n = members.len() as f64;
    centroid.iter_mut().for_each(|c| *c /= n);
    let mut best: Option<(&Trace, f64)> = None;
    for m in members {
        let dist = squared_distance(&m.trace.embedding, &centroid).sqrt();
        let better = match best {
            None => true,
            Some((b, bd)) => dist < bd || (dist == bd && m.trace.id < b.id),
        };
        if better {
            best = Some((m.trace, dist));
        }
    }
    best.expect("non-empty cell")
}

/// For every (label, routing group) cell of texted traces, the member
/// closest to the cell's embedding centroid. Ties go to the lower trace id.
pub fn representative_cards(routed: &[RoutedExample<'_>], labels: &LabelDictionary) -> Vec<ExampleCard> {
    let mut cells: BTreeMap<(LabelId, RoutingGroup), Vec<&RoutedExample<'_>>> = BTreeMap::new();
    for r in routed.iter().filter(|r| r.trace.text.is_some()) {
        let group = if r.handled { RoutingGroup::Handled } else { RoutingGroup::Deferred };
        cells.entry((r.trace.teacher_label, group)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((label, group), members)| {
            let (t, dist) = nearest_to_centroid(&members);
            ExampleCard {
                label: label_name(labels, label),
                group,
                trace_id: t.id.clone(),
                text: t.text.clone().unwrap_or_default(),
                distance_to_centroid: dist,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub trace_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPair {
    pub label: String,
    pub handled: PairExample,
    pub deferred: PairExample,
}

impl BoundaryPair {
    pub fn contrast(&self) -> f64 {
        self.handled.score - self.deferred.score
    }
}

/// Same-label pairs with opposite routing: the highest-scoring handled and
/// the lowest-scoring deferred texted example per label, keeping the `cap`
/// labels with the largest score contrast.
pub fn boundary_pairs(routed: &[RoutedExample<'_>], labels: &LabelDictionary, cap: usize) -> Vec<BoundaryPair> {
    let mut best: BTreeMap<LabelId, (Option<&RoutedExample<'_>>, Option<&RoutedExample<'_>>)> = BTreeMap::new();
    for r in routed.iter().filter(|r| r.trace.text.is_some()) {
        let slot = best.entry(r.trace.teacher_label).or_default();
        if r.handled {
            let replace = slot.0.is_none_or(|h| r.score > h.score || (r.score == h.score && r.trace.id < h.trace.id));
            if replace {
                slot.0 = Some(r);
            }
        } else {
            let replace = slot.1.is_none_or(|d| r.score < d.score || (r.score == d.score && r.trace.id < d.trace.id));
            if replace {
                slot.1 = Some(r);
            }
        }
    }
    let example = |r: &RoutedExample<'_>| PairExample {
        trace_id: r.trace.id.clone(),
        text: r.trace.text.clone().unwrap_or_default(),
        score: r.score,
    };
    let mut pairs: Vec<BoundaryPair> = best
        .into_iter()
        .filter_map(|(label, slot)| match slot {
            (Some(h), Some(d)) => Some(BoundaryPair {
                label: label_name(labels, label),
                handled: example(h),
                deferred: example(d),
            }),
            _ => None,
        })
        .collect();
    pairs.sort_by(|a, b| b.contrast().total_cmp(&a.contrast()).then_with(|| a.label.cmp(&b.label)));
    pairs.truncate(cap);
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalDelta {
    pub label: String,
    pub n: usize,
    pub previous_rate: f64,
    pub current_rate: f64,
    pub delta: f64,
}

fn handled_by_label(routed: &[RoutedExample<'_>]) -> BTreeMap<LabelId, (usize, usize)> {
    let mut m: BTreeMap<LabelId, (usize, usize)> = BTreeMap::new();
    for r in routed {
        let e = m.entry(r.trace.teacher_label).or_default();
        e.0 += 1;
        e.1 += usize::from(r.handled);
    }
    m
}

/// Per-label handled-rate change between two routing states on the same
/// reference set. The never-fitted initial state (version 0) has no
/// predecessor to compare against, so the list is empty.
pub fn temporal_deltas(
    previous: &RoutingState,
    current: &RoutingState,
    reference: &[&Trace],
    labels: &LabelDictionary,
) -> Result<Vec<TemporalDelta>, ArtifactError> {
    if previous.version() == 0 {
        return Ok(Vec::new());
    }
    let prev = handled_by_label(&route_reference(previous, reference)?);
    let cur = handled_by_label(&route_reference(current, reference)?);
    Ok(cur
        .iter()
        .map(|(label, &(n, handled))| {
            let previous_rate = prev[label].1 as f64 / n as f64;
            let current_rate = handled as f64 / n as f64;
            TemporalDelta {
                label: label_name(labels, *label),
                n,
                previous_rate,
                current_rate,
                delta: current_rate - previous_rate,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementItem {
    pub trace_id: String,
    pub text: Option<String>,
    pub teacher_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementCard {
    pub predicted: String,
    pub count: usize,
    pub items: Vec<DisagreementItem>,
}

/// Held-out surrogate/teacher disagreements grouped by the surrogate's
/// predicted class, largest group first. Each group lists at most `cap`
/// items; `count` is always exact.
pub fn disagreement_cards(model: &SurrogateModel, heldout: &[&Trace], labels: &LabelDictionary, cap: usize) -> Result<Vec<DisagreementCard>, ArtifactError> {
    let mut groups: BTreeMap<LabelId, DisagreementCard> = BTreeMap::new();
    for t in heldout {
        let predicted = model.predict(&t.embedding)?;
        if predicted == t.teacher_label {
            continue;
        }
        let card = groups.entry(predicted).or_insert_with(|| DisagreementCard {
            predicted: label_name(labels, predicted),
            count: 0,
            items: Vec::new(),
        });
        card.count += 1;
        if card.items.len() < cap {
            card.items.push(DisagreementItem {
                trace_id: t.id.clone(),
                text: t.text.clone(),
                teacher_label: label_name(labels, t.teacher_label),
            });
        }
    }
    let mut out: Vec<DisagreementCard> = groups.into_values().collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.predicted.cmp(&b.predicted)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub version: u64,
    pub alpha: Alpha,
    pub family: PipelineFamily,
    pub tau: Option<f64>,
    pub calibration: EvalMetrics,
    pub shadow: EvalMetrics,
    pub slices: Vec<SliceSummary>,
    pub length_bins: Option<LengthBinEdges>,
    pub example_cards: Vec<ExampleCard>,
    pub boundary_pairs: Vec<BoundaryPair>,
    pub temporal_deltas: Vec<TemporalDelta>,
    pub disagreements: Vec<DisagreementCard>,
}

impl ReportBundle {
    pub fn label_slices(&self) -> impl Iterator<Item = &SliceSummary> {
        self.slices.iter().filter(|s| matches!(s.key, SliceKey::Label(_)))
    }
}

/// What a refused refit leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictStub {
    pub version: u64,
    pub alpha: Alpha,
    pub reason: RefusalReason,
    pub evaluations: Vec<CandidateEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Bundle(ReportBundle),
    Stub(VerdictStub),
}

impl Report {
    pub fn version(&self) -> u64 {
        match self {
            Report::Bundle(b) => b.version,
            Report::Stub(s) => s.version,
        }
    }

    pub fn bundle(&self) -> Option<&ReportBundle> {
        match self {
            Report::Bundle(b) => Some(b),
            Report::Stub(_) => None,
        }
    }
}

pub struct ReportContext<'a> {
    pub decision: &'a GateDecision,
    pub previous: &'a RoutingState,
    pub current: &'a RoutingState,
    /// Shadow split of the current buffer.
    pub reference: &'a [&'a Trace],
    pub labels: &'a LabelDictionary,
    pub config: &'a ArtifactConfig,
}

pub fn build_report(ctx: &ReportContext<'_>) -> Result<Report, ArtifactError> {
    let version = ctx.current.version();
    let (candidate, shadow) = match &ctx.decision.verdict {
        GateVerdict::Refused { reason } => {
            return Ok(Report::Stub(VerdictStub {
                version,
                alpha: ctx.decision.alpha,
                reason: *reason,
                evaluations: ctx.decision.evaluations.clone(),
            }))
        }
        GateVerdict::Promoted { candidate, shadow } => (candidate, shadow),
    };
    if ctx.reference.is_empty() {
        return Err(ArtifactError::EmptyReference);
    }
    let routed = route_reference(ctx.current, ctx.reference)?;
    let (slices, length_bins) = slice_summaries(&routed, ctx.labels);
    Ok(Report::Bundle(ReportBundle {
        version,
        alpha: ctx.decision.alpha,
        family: candidate.family(),
        tau: candidate.tau(),
        calibration: candidate.calibration.clone(),
        shadow: shadow.clone(),
        slices,
        length_bins,
        example_cards: representative_cards(&routed, ctx.labels),
        boundary_pairs: boundary_pairs(&routed, ctx.labels, ctx.config.boundary_pairs),
        temporal_deltas: temporal_deltas(ctx.previous, ctx.current, ctx.reference, ctx.labels)?,
        disagreements: disagreement_cards(&candidate.surrogate, ctx.reference, ctx.labels, ctx.config.disagreement_cap)?,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Structured,
    HumanReadable,
}

pub fn emit_report(report: &Report, format: ReportFormat) -> String {
    match format {
        ReportFormat::Structured => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::HumanReadable => render_text(report),
    }
}

pub fn parse_report(doc: &str) -> Result<Report, ArtifactError> {
    Ok(serde_json::from_str(doc)?)
}

fn pct(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

/// `.959`-style rendering for rates in [0, 1].
fn rate(v: Option<f64>) -> String {
    match v {
        None => "--".into(),
        Some(x) if x >= 1.0 => "1.000".into(),
        Some(x) => format!("{x:.3}").trim_start_matches('0').to_owned(),
    }
}

fn render_text(report: &Report) -> String {
    let mut s = String::new();
    match report {
        Report::Stub(stub) => {
            let _ = writeln!(s, "# Routing report v{}\n", stub.version);
            let _ = writeln!(s, "alpha {} | verdict: refused ({})\n", stub.alpha, stub.reason);
            let _ = writeln!(
                s,
                "No artifacts: no pipeline cleared the parity gate. All traffic is routed to the teacher."
            );
            if !stub.evaluations.is_empty() {
                let _ = writeln!(s, "\n| Candidate | Cal cov | Cal TA | Shadow cov | Shadow TA |");
                let _ = writeln!(s, "|---|---:|---:|---:|---:|");
                for e in &stub.evaluations {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {} | {} |",
                        e.family,
                        pct(e.calibration.coverage),
                        rate(e.calibration.ta_on_handled),
                        pct(e.shadow.coverage),
                        rate(e.shadow.ta_on_handled)
                    );
                }
            }
        }
        Report::Bundle(b) => {
            let _ = writeln!(s, "# Routing report v{}\n", b.version);
            let tau = b.tau.map(|t| format!(" (tau {t:.4})")).unwrap_or_default();
            let _ = writeln!(
                s,
                "alpha {} | pipeline {}{} | shadow coverage {} | shadow TA {} | calibration coverage {} | calibration TA {}\n",
                b.alpha,
                b.family,
                tau,
                pct(b.shadow.coverage),
                rate(b.shadow.ta_on_handled),
                pct(b.calibration.coverage),
                rate(b.calibration.ta_on_handled),
            );

            let _ = writeln!(s, "## Slice summaries\n");
            let _ = writeln!(s, "| Label | Handled | TA | n |");
            let _ = writeln!(s, "|---|---:|---:|---:|");
            let mut label_slices: Vec<&SliceSummary> = b.label_slices().collect();
            label_slices.sort_by(|x, y| x.handled_rate.total_cmp(&y.handled_rate).then_with(|| x.key.to_string().cmp(&y.key.to_string())));
            for sl in label_slices {
                let _ = writeln!(s, "| `{}` | {} | {} | {} |", sl.key, pct(sl.handled_rate), rate(sl.ta_on_handled), sl.n);
            }
            if let Some(edges) = b.length_bins {
                let _ = writeln!(
                    s,
                    "\nLength bins (characters): short <= {}, medium <= {}, long > {}\n",
                    edges.short_max, edges.medium_max, edges.medium_max
                );
                let _ = writeln!(s, "| Length | Handled | TA | n |");
                let _ = writeln!(s, "|---|---:|---:|---:|");
                for sl in b.slices.iter().filter(|s| matches!(s.key, SliceKey::Length(_))) {
                    let _ = writeln!(s, "| {} | {} | {} | {} |", sl.key, pct(sl.handled_rate), rate(sl.ta_on_handled), sl.n);
                }
            }

            let _ = writeln!(s, "\n## Boundary pairs\n");
            if b.boundary_pairs.is_empty() {
                let _ = writeln!(s, "None (no label has both handled and deferred examples).");
            }
            for (i, p) in b.boundary_pairs.iter().enumerate() {
                let _ = writeln!(s, "{}. **{}.**", i + 1, p.label);
                let _ = writeln!(s, "   Handled ({:.2}): \"{}\"", p.handled.score, p.handled.text);
                let _ = writeln!(s, "   Deferred ({:.2}): \"{}\"", p.deferred.score, p.deferred.text);
            }

            let _ = writeln!(s, "\n## Representative examples\n");
            for c in &b.example_cards {
                let _ = writeln!(s, "- `{}` / {:?}: \"{}\" (distance {:.3})", c.label, c.group, c.text, c.distance_to_centroid);
            }

            let _ = writeln!(s, "\n## Temporal deltas\n");
            if b.temporal_deltas.is_empty() {
                let _ = writeln!(s, "None (first refit).");
            } else {
                let _ = writeln!(s, "| Label | Previous | Current | Delta |");
                let _ = writeln!(s, "|---|---:|---:|---:|");
                for d in &b.temporal_deltas {
                    let _ = writeln!(
                        s,
                        "| `{}` | {} | {} | {:+.1} pp |",
                        d.label,
                        pct(d.previous_rate),
                        pct(d.current_rate),
                        d.delta * 100.0
                    );
                }
            }

            let _ = writeln!(s, "\n## Disagreements\n");
            if b.disagreements.is_empty() {
                let _ = writeln!(s, "None on held-out data.");
            }
            for g in &b.disagreements {
                let _ = writeln!(s, "- surrogate says `{}` ({} cases)", g.predicted, g.count);
                for item in &g.items {
                    let text = item.text.as_deref().unwrap_or(&item.trace_id);
                    let _ = writeln!(s, "  - \"{}\" -> teacher `{}`", text, item.teacher_label);
                }
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::{Family, Params};

    fn tr(id: &str, label: LabelId, text: Option<&str>, emb: Vec<f64>) -> Trace {
        Trace {
            id: id.into(),
            text: text.map(str::to_owned),
            embedding: emb,
            teacher_label: label,
            day: 0,
            ground_truth: None,
        }
    }

    fn routed<'a>(t: &'a Trace, handled: bool, score: f64, pred: LabelId) -> RoutedExample<'a> {
        RoutedExample {
            trace: t,
            handled,
            score,
            surrogate_label: Some(pred),
        }
    }

    fn dict() -> LabelDictionary {
        LabelDictionary::from_names(["a", "b", "c"])
    }

    #[test]
    fn slice_hand_count() {
        let ts: Vec<Trace> = (0..4).map(|i| tr(&format!("t{i}"), 0, None, vec![0.0])).collect();
        // 3 handled, 2 of them agreeing.
        let r = vec![
            routed(&ts[0], true, 0.9, 0),
            routed(&ts[1], true, 0.9, 0),
            routed(&ts[2], true, 0.9, 1),
            routed(&ts[3], false, 0.1, 0),
        ];
        let (s, edges) = slice_summaries(&r, &dict());
        assert!(edges.is_none());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].handled_rate, 0.75);
        assert!((s[0].ta_on_handled.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_terciles_partition_texted_traces() {
        let texts = ["a", "bb", "ccc", "dddd", "eeeee", "ffffff", "g"];
        let ts: Vec<Trace> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| tr(&format!("t{i}"), i % 2, Some(t), vec![0.0]))
            .chain(std::iter::once(tr("x", 0, None, vec![0.0])))
            .collect();
        let r: Vec<_> = ts.iter().map(|t| routed(t, true, 1.0, t.teacher_label)).collect();
        let (s, edges) = slice_summaries(&r, &dict());
        let edges = edges.unwrap();
        // sorted lengths 1,1,2,3,4,5,6: ranks ceil(7/3)=3 -> 2, ceil(14/3)=5 -> 4
        assert_eq!(edges, LengthBinEdges { short_max: 2, medium_max: 4 });
        let label_n: usize = s.iter().filter(|x| matches!(x.key, SliceKey::Label(_))).map(|x| x.n).sum();
        let len_n: usize = s.iter().filter(|x| matches!(x.key, SliceKey::Length(_))).map(|x| x.n).sum();
        assert_eq!(label_n, 8);
        assert_eq!(len_n, 7);
    }

    #[test]
    fn single_member_card_has_zero_distance() {
        let t = tr("only", 0, Some("hi"), vec![1.0, 2.0]);
        let cards = representative_cards(&[routed(&t, true, 1.0, 0)], &dict());
        assert_eq!(cards.len(), 1);
        assert_eq!(cards[0].distance_to_centroid, 0.0);
        assert_eq!(cards[0].trace_id, "only");
    }

    #[test]
    fn colinear_card_picks_middle() {
        let ts: Vec<Trace> = [0.0, 1.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, x)| tr(&format!("p{i}"), 0, Some("t"), vec![*x]))
            .collect();
        let r: Vec<_> = ts.iter().map(|t| routed(t, false, 0.0, 0)).collect();
        let cards = representative_cards(&r, &dict());
        assert_eq!(cards[0].trace_id, "p1");
        assert_eq!(cards[0].group, RoutingGroup::Deferred);
    }

    #[test]
    fn cards_skip_textless_and_tie_to_lower_id() {
        let ts = vec![
            tr("b", 0, Some("x"), vec![-1.0]),
            tr("a", 0, Some("y"), vec![1.0]),
            tr("z", 0, None, vec![50.0]),
        ];
        let r: Vec<_> = ts.iter().map(|t| routed(t, true, 1.0, 0)).collect();
        let cards = representative_cards(&r, &dict());
        assert_eq!(cards.len(), 1);
        assert_eq!(cards[0].trace_id, "a");
    }

    #[test]
    fn boundary_pair_takes_extremes() {
        let ts: Vec<Trace> = (0..4).map(|i| tr(&format!("t{i}"), 1, Some("q"), vec![0.0])).collect();
        let r = vec![
            routed(&ts[0], true, 0.7, 1),
            routed(&ts[1], true, 0.9, 1),
            routed(&ts[2], false, 0.3, 1),
            routed(&ts[3], false, 0.1, 1),
        ];
        let pairs = boundary_pairs(&r, &dict(), 5);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].label, "b");
        assert_eq!((pairs[0].handled.score, pairs[0].deferred.score), (0.9, 0.1));
        assert_eq!((pairs[0].handled.trace_id.as_str(), pairs[0].deferred.trace_id.as_str()), ("t1", "t3"));
    }

    #[test]
    fn full_coverage_has_no_pairs_and_cap_applies() {
        let ts: Vec<Trace> = (0..6).map(|i| tr(&format!("t{i}"), i % 3, Some("q"), vec![0.0])).collect();
        let all_handled: Vec<_> = ts.iter().map(|t| routed(t, true, 1.0, 0)).collect();
        assert!(boundary_pairs(&all_handled, &dict(), 5).is_empty());
        let mixed: Vec<_> = ts.iter().enumerate().map(|(i, t)| routed(t, i < 3, if i < 3 { 0.9 } else { 0.1 + i as f64 * 0.01 }, 0)).collect();
        let pairs = boundary_pairs(&mixed, &dict(), 2);
        assert_eq!(pairs.len(), 2);
        assert!(pairs[0].contrast() >= pairs[1].contrast());
    }

    fn const_model(class: usize) -> SurrogateModel {
        // Bias-only linear model predicting `class` everywhere.
        let mut packed = vec![0.0; 3 + 3];
        packed[3 + class] = 5.0;
        SurrogateModel {
            family: Family::MultinomialLr,
            dim: 1,
            labels: dict(),
            seed: 0,
            params: Params::Linear { packed },
        }
    }

    #[test]
    fn disagreement_groups_and_cap() {
        let m = const_model(0);
        let ts: Vec<Trace> = (0..30).map(|i| tr(&format!("t{i}"), i % 3, None, vec![0.0])).collect();
        let refs: Vec<&Trace> = ts.iter().collect();
        let cards = disagreement_cards(&m, &refs, &dict(), 5).unwrap();
        assert_eq!(cards.len(), 1);
        assert_eq!(cards[0].predicted, "a");
        assert_eq!(cards[0].count, 20);
        assert_eq!(cards[0].items.len(), 5);
        assert!(cards[0].items.iter().all(|i| i.teacher_label != "a"));

        let agree: Vec<Trace> = (0..5).map(|i| tr(&format!("u{i}"), 0, None, vec![0.0])).collect();
        let refs: Vec<&Trace> = agree.iter().collect();
        assert!(disagreement_cards(&m, &refs, &dict(), 5).unwrap().is_empty());
    }

    #[test]
    fn rate_rendering() {
        assert_eq!(rate(Some(0.959)), ".959");
        assert_eq!(rate(Some(1.0)), "1.000");
        assert_eq!(rate(None), "--");
    }
}
