//! Append-only trace buffer, open label dictionary and hash-based splits.
//!
//! A trace pairs an input embedding with the label the teacher assigned to
//! it. Traces are never mutated once ingested; the label dictionary only ever
//! grows, so label indices stay valid across refits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a [`LabelDictionary`].
pub type LabelId = usize;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("trace `{id}` has embedding dimension {found}, buffer expects {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate trace id `{0}`")]
    DuplicateId(String),
    #[error("trace `{id}` has day {day}, earlier than already ingested day {latest}")]
    DayRegression { id: String, day: u32, latest: u32 },
    #[error("trace `{0}` has an empty embedding")]
    EmptyEmbedding(String),
    #[error("trace `{0}` has a non-finite embedding component")]
    NonFinite(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 4]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bidirectional label-string / contiguous-index map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelDictionary {
    names: Vec<String>,
    index: HashMap<String, LabelId>,
}

impl LabelDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut dict = Self::new();
        for name in names {
            dict.register(name.as_ref());
        }
        dict
    }

    /// Returns the index of `name`, appending it when unseen.
    pub fn register(&mut self, name: &str) -> LabelId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: LabelId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Effective class count K.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl Serialize for LabelDictionary {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.names.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LabelDictionary {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(deserializer)?;
        let dict = Self::from_names(&names);
        if dict.len() != names.len() {
            return Err(serde::de::Error::custom("label dictionary contains duplicates"));
        }
        Ok(dict)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    pub text: Option<String>,
    pub embedding: Vec<f64>,
    pub teacher_label: LabelId,
    pub day: u32,
    /// Evaluation only: never consumed by training, acceptor fitting or gating.
    pub ground_truth: Option<LabelId>,
}

/// One line of a trace file. Labels are carried as strings and resolved
/// against the buffer's dictionary at ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub embedding: Vec<f64>,
    pub teacher_label: String,
    pub day: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Calibration,
    Shadow,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Validation,
        Split::Calibration,
        Split::Shadow,
    ];
}

/// Proportions of traffic assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub calibration: f64,
    pub shadow: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            validation: 0.10,
            calibration: 0.10,
            shadow: 0.10,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, calibration: f64, shadow: f64) -> Result<Self, StoreError> {
        let f = Self {
            train,
            validation,
            calibration,
            shadow,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.train, self.validation, self.calibration, self.shadow]
    }

    pub fn get(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Calibration => self.calibration,
            Split::Shadow => self.shadow,
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let a = self.as_array();
        let sum: f64 = a.iter().sum();
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(StoreError::InvalidFractions(a));
        }
        Ok(())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Fixed 64-bit hash of a trace id: FNV-1a followed by a splitmix64 finalizer.
/// Stable across platforms and releases.
pub fn id_hash(id: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Maps a trace id to a point in `[0, 1)`.
pub fn id_unit(id: &str) -> f64 {
    (id_hash(id) >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic split for a trace id, bucketed by cumulative fractions.
pub fn assign_split(trace_id: &str, fractions: &SplitFractions) -> Split {
    let u = id_unit(trace_id);
    let mut cumulative = 0.0;
    for split in Split::ALL {
        let f = fractions.get(split);
        cumulative += f;
        if f > 0.0 && u < cumulative {
            return split;
        }
    }
    // Rounding left `u` above the cumulative sum: fall back to the last
    // split that receives any mass.
    Split::ALL
        .into_iter()
        .rev()
        .find(|s| fractions.get(*s) > 0.0)
        .unwrap_or(Split::Train)
}

/// Append-only trace store with a fixed embedding dimension.
#[derive(Debug, Clone, Default)]
pub struct TraceBuffer {
    dim: Option<usize>,
    traces: Vec<Trace>,
    ids: HashSet<String>,
    labels: LabelDictionary,
    day_counts: BTreeMap<u32, usize>,
}

impl TraceBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Buffer whose dictionary is pre-populated, so label indices are fixed
    /// before any trace arrives.
    pub fn with_labels(labels: LabelDictionary) -> Self {
        Self {
            labels,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn labels(&self) -> &LabelDictionary {
        &self.labels
    }

    pub fn day_counts(&self) -> &BTreeMap<u32, usize> {
        &self.day_counts
    }

    pub fn latest_day(&self) -> Option<u32> {
        self.day_counts.keys().next_back().copied()
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn register_label(&mut self, name: &str) -> LabelId {
        self.labels.register(name)
    }

    /// Ingests `records` atomically: either every record is appended or the
    /// buffer is left untouched.
    pub fn ingest(&mut self, records: Vec<TraceRecord>) -> Result<usize, StoreError> {
        let mut dim = self.dim;
        let mut latest = self.latest_day();
        let mut seen = HashSet::new();
        for r in &records {
            check_embedding(&r.id, &r.embedding, &mut dim)?;
            if self.ids.contains(&r.id) || !seen.insert(r.id.as_str()) {
                return Err(StoreError::DuplicateId(r.id.clone()));
            }
            if let Some(l) = latest {
                if r.day < l {
                    return Err(StoreError::DayRegression {
                        id: r.id.clone(),
                        day: r.day,
                        latest: l,
                    });
                }
            }
            latest = Some(r.day);
        }

        let n = records.len();
        for r in records {
            let teacher_label = self.labels.register(&r.teacher_label);
            let ground_truth = r.ground_truth.as_deref().map(|g| self.labels.register(g));
            self.push_unchecked(Trace {
                id: r.id,
                text: r.text,
                embedding: r.embedding,
                teacher_label,
                day: r.day,
                ground_truth,
            });
        }
        self.dim = dim;
        Ok(n)
    }

    /// Appends already-resolved traces. Label indices must come from this
    /// buffer's dictionary.
    pub fn append(&mut self, traces: Vec<Trace>) -> Result<usize, StoreError> {
        let records = traces
            .into_iter()
            .map(|t| self.to_record(&t))
            .collect::<Vec<_>>();
        self.ingest(records)
    }

    fn push_unchecked(&mut self, trace: Trace) {
        self.ids.insert(trace.id.clone());
        *self.day_counts.entry(trace.day).or_insert(0) += 1;
        self.traces.push(trace);
    }

    /// Converts a trace back to its file record.
    ///
    /// # Panics
    ///
    /// Panics if the trace refers to a label index outside this dictionary.
    pub fn to_record(&self, t: &Trace) -> TraceRecord {
        let name = |id: LabelId| {
            self.labels
                .name(id)
                .unwrap_or_else(|| panic!("label index {id} not registered"))
                .to_owned()
        };
        TraceRecord {
            id: t.id.clone(),
            text: t.text.clone(),
            embedding: t.embedding.clone(),
            teacher_label: name(t.teacher_label),
            day: t.day,
            ground_truth: t.ground_truth.map(name),
        }
    }

    pub fn to_records(&self) -> Vec<TraceRecord> {
        self.traces.iter().map(|t| self.to_record(t)).collect()
    }

    /// Traces whose id hashes into `split`, in ingestion order.
    pub fn traces_for(&self, split: Split, fractions: &SplitFractions) -> Vec<&Trace> {
        self.traces
            .iter()
            .filter(|t| assign_split(&t.id, fractions) == split)
            .collect()
    }

    /// Copy of the buffer restricted to traces with `day <= last_day`.
    pub fn through_day(&self, last_day: u32) -> TraceBuffer {
        let mut out = TraceBuffer {
            dim: self.dim,
            labels: self.labels.clone(),
            ..TraceBuffer::default()
        };
        for t in self.traces.iter().filter(|t| t.day <= last_day) {
            out.push_unchecked(t.clone());
        }
        out
    }
}

fn check_embedding(id: &str, embedding: &[f64], dim: &mut Option<usize>) -> Result<(), StoreError> {
    if embedding.is_empty() {
        return Err(StoreError::EmptyEmbedding(id.to_owned()));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite(id.to_owned()));
    }
    match *dim {
        Some(d) if d != embedding.len() => Err(StoreError::DimensionMismatch {
            id: id.to_owned(),
            expected: d,
            found: embedding.len(),
        }),
        Some(_) => Ok(()),
        None => {
            *dim = Some(embedding.len());
            Ok(())
        }
    }
}

/// Reads a line-delimited JSON trace file. Blank lines are skipped.
pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, StoreError> {
    let file = std::fs::File::open(path)?;
    parse_trace_lines(BufReader::new(file))
}

pub fn parse_trace_lines(reader: impl BufRead) -> Result<Vec<TraceRecord>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_trace_file(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<(), StoreError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: &str, day: u32, emb: Vec<f64>) -> TraceRecord {
        TraceRecord {
            id: id.into(),
            text: None,
            embedding: emb,
            teacher_label: label.into(),
            day,
            ground_truth: None,
        }
    }

    #[test]
    fn empty_ingest_leaves_buffer_unchanged() {
        let mut buf = TraceBuffer::new();
        buf.ingest(vec![rec("a", "x", 0, vec![1.0, 2.0])]).unwrap();
        assert_eq!(buf.ingest(vec![]).unwrap(), 0);
        assert_eq!(buf.len(), 1);
        assert_eq!(buf.labels().len(), 1);
    }

    #[test]
    fn day_one_batch_size() {
        let mut buf = TraceBuffer::new();
        let recs = (0..2001)
            .map(|i| rec(&format!("t{i}"), "l", 1, vec![i as f64]))
            .collect();
        buf.ingest(recs).unwrap();
        assert_eq!(buf.len(), 2001);
        assert_eq!(buf.day_counts()[&1], 2001);
    }

    #[test]
    fn novel_label_extends_dictionary() {
        let names: Vec<String> = (0..150).map(|i| format!("intent_{i}")).collect();
        let mut buf = TraceBuffer::with_labels(LabelDictionary::from_names(&names));
        assert_eq!(buf.labels().len(), 150);
        buf.ingest(vec![rec("q1", "hotel_launchpad", 0, vec![0.0; 3])]).unwrap();
        assert_eq!(buf.labels().len(), 151);
        assert_eq!(buf.labels().id("hotel_launchpad"), Some(150));
        assert_eq!(buf.labels().id("intent_7"), Some(7));
    }

    #[test]
    fn dimension_mismatch_names_offender_and_is_atomic() {
        let mut buf = TraceBuffer::new();
        let err = buf
            .ingest(vec![rec("a", "x", 0, vec![1.0, 2.0]), rec("b", "y", 0, vec![1.0])])
            .unwrap_err();
        match err {
            StoreError::DimensionMismatch { id, expected, found } => {
                assert_eq!((id.as_str(), expected, found), ("b", 2, 1));
            }
            e => panic!("unexpected {e}"),
        }
        assert!(buf.is_empty());
        assert!(buf.labels().is_empty());
        assert_eq!(buf.dim(), None);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut buf = TraceBuffer::new();
        buf.ingest(vec![rec("a", "x", 0, vec![1.0])]).unwrap();
        assert!(matches!(
            buf.ingest(vec![rec("a", "x", 0, vec![1.0])]),
            Err(StoreError::DuplicateId(_))
        ));
        assert!(matches!(
            buf.ingest(vec![rec("b", "x", 0, vec![1.0]), rec("b", "x", 0, vec![1.0])]),
            Err(StoreError::DuplicateId(_))
        ));
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn day_regression_rejected() {
        let mut buf = TraceBuffer::new();
        buf.ingest(vec![rec("a", "x", 2, vec![1.0])]).unwrap();
        assert!(matches!(
            buf.ingest(vec![rec("b", "x", 1, vec![1.0])]),
            Err(StoreError::DayRegression { .. })
        ));
    }

    #[test]
    fn split_is_deterministic_and_degenerate_fractions_collapse() {
        let f = SplitFractions::default();
        assert_eq!(assign_split("abc", &f), assign_split("abc", &f));
        let all_train = SplitFractions::new(1.0, 0.0, 0.0, 0.0).unwrap();
        for i in 0..1000 {
            assert_eq!(assign_split(&format!("id-{i}"), &all_train), Split::Train);
        }
        let all_shadow = SplitFractions::new(0.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(assign_split("x", &all_shadow), Split::Shadow);
    }

    #[test]
    fn invalid_fractions() {
        assert!(SplitFractions::new(0.5, 0.5, 0.5, -0.5).is_err());
        assert!(SplitFractions::new(0.7, 0.1, 0.1, 0.2).is_err());
    }

    #[test]
    fn zero_fraction_split_is_empty_and_partition_holds() {
        let mut buf = TraceBuffer::new();
        let recs = (0..500).map(|i| rec(&format!("t{i}"), "l", 0, vec![0.0])).collect();
        buf.ingest(recs).unwrap();
        let f = SplitFractions::new(0.8, 0.0, 0.1, 0.1).unwrap();
        assert!(buf.traces_for(Split::Validation, &f).is_empty());
        let total: usize = Split::ALL.iter().map(|s| buf.traces_for(*s, &f).len()).sum();
        assert_eq!(total, 500);
    }

    #[test]
    fn parse_error_reports_line_number() {
        let text = "{\"id\":\"a\",\"embedding\":[1.0],\"teacher_label\":\"x\",\"day\":0}\n\nnot json\n";
        match parse_trace_lines(text.as_bytes()) {
            Err(StoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dictionary_serde_roundtrip() {
        let d = LabelDictionary::from_names(["b", "a", "c"]);
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"["b","a","c"]"#);
        let back: LabelDictionary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<LabelDictionary>(r#"["a","a"]"#).is_err());
    }
}
