//! Pressure traces, labels, labeled records and datasets, plus the two text
//! formats used to move them around: the trace CSV and the dataset JSONL.
//!
//! Pressure is always in hPa. Timestamps are integer epoch milliseconds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Rate at which the platform sensor API hands out barometer samples.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 25.0;

/// Version tag written into the dataset JSONL header.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Allowed relative disagreement between the declared rate and the rate
/// implied by the median timestamp delta.
const RATE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("sample rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("sample {index} is not finite")]
    NonFiniteSample { index: usize },
    #[error("no samples")]
    NoSamples,
    #[error("missing `# rate_hz=...,start_ms=...` header line")]
    MissingHeader,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: pressure value is not finite")]
    NonFiniteRow { line: usize },
    #[error("line {line}: timestamp {timestamp_ms} does not increase")]
    NonMonotonic { line: usize, timestamp_ms: i64 },
    #[error("header declares {declared_hz} Hz but timestamps imply {observed_hz} Hz")]
    RateMismatch { declared_hz: f64, observed_hz: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("window length must be positive")]
    ZeroWindowLen,
    #[error("class {0} listed twice")]
    DuplicateClass(Label),
    #[error("record {index}: window has {found} values, expected {expected}")]
    WindowLength {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {index}: label {label} is not in the class set")]
    LabelNotInClassSet { index: usize, label: Label },
    #[error("record {index}: window contains a non-finite value")]
    NonFinite { index: usize },
    #[error("missing header line")]
    MissingHeader,
    #[error("line {line}: unsupported dataset version {version}")]
    UnsupportedVersion { line: usize, version: u32 },
    #[error("line {line}: malformed: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: window has {found} values, expected {expected}")]
    LineWindowLength {
        line: usize,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid label {0:?}")]
pub struct ParseLabelError(pub String);

/// A uniformly sampled barometric pressure series.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureTrace {
    sample_rate_hz: f64,
    start_time_ms: i64,
    samples: Vec<f64>,
}

impl PressureTrace {
    pub fn new(
        sample_rate_hz: f64,
        start_time_ms: i64,
        samples: Vec<f64>,
    ) -> Result<Self, TraceError> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(TraceError::InvalidRate(sample_rate_hz));
        }
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(TraceError::NonFiniteSample { index });
        }
        Ok(Self {
            sample_rate_hz,
            start_time_ms,
            samples,
        })
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn start_time_ms(&self) -> i64 {
        self.start_time_ms
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Seconds from the start of the trace to sample `index`.
    pub fn offset_s(&self, index: usize) -> f64 {
        index as f64 / self.sample_rate_hz
    }

    /// Epoch time of sample `index` in (fractional) milliseconds.
    pub fn time_ms(&self, index: usize) -> f64 {
        self.start_time_ms as f64 + index as f64 * 1000.0 / self.sample_rate_hz
    }

    /// Time between the first and last sample: `(n - 1) / rate`.
    pub fn duration_s(&self) -> f64 {
        self.samples.len().saturating_sub(1) as f64 / self.sample_rate_hz
    }

    /// Serializes to the trace CSV format. Timestamps are rounded to whole
    /// milliseconds; pressures keep full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.samples.len() * 24 + 40);
        out.push_str(&format!(
            "# rate_hz={},start_ms={}\n",
            self.sample_rate_hz, self.start_time_ms
        ));
        for (i, v) in self.samples.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.time_ms(i).round() as i64, v));
        }
        out
    }
}

/// Parses the trace CSV format.
///
/// The first line must be `# rate_hz=<float>,start_ms=<int>`; each following
/// non-blank line is `timestamp_ms,pressure_hpa`. Timestamps must strictly
/// increase and their median spacing must agree with the declared rate to
/// within 1%. Accepted samples are snapped onto the uniform grid defined by the
/// header.
pub fn parse_trace_csv(text: &str) -> Result<PressureTrace, TraceError> {
    let mut lines = text.lines().enumerate();
    let (rate, start_ms) = loop {
        match lines.next() {
            None => return Err(TraceError::MissingHeader),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break parse_header(l)?,
        };
    };

    let mut timestamps: Vec<i64> = Vec::new();
    let mut samples: Vec<f64> = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let mut fields = row.split(',');
        let (ts, p) = match (fields.next(), fields.next(), fields.next()) {
            (Some(ts), Some(p), None) => (ts.trim(), p.trim()),
            _ => {
                return Err(TraceError::MalformedRow {
                    line,
                    reason: "expected `timestamp_ms,pressure_hpa`".into(),
                })
            }
        };
        let ts: i64 = ts.parse().map_err(|_| TraceError::MalformedRow {
            line,
            reason: format!("timestamp {ts:?} is not an integer"),
        })?;
        let p: f64 = p.parse().map_err(|_| TraceError::MalformedRow {
            line,
            reason: format!("pressure {p:?} is not a number"),
        })?;
        if !p.is_finite() {
            return Err(TraceError::NonFiniteRow { line });
        }
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(TraceError::NonMonotonic {
                    line,
                    timestamp_ms: ts,
                });
            }
        }
        timestamps.push(ts);
        samples.push(p);
    }

    if samples.is_empty() {
        return Err(TraceError::NoSamples);
    }
    if timestamps.len() >= 2 {
        let mut deltas: Vec<i64> = timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        deltas.sort_unstable();
        let n = deltas.len();
        let median_ms = if n % 2 == 1 {
            deltas[n / 2] as f64
        } else {
            (deltas[n / 2 - 1] + deltas[n / 2]) as f64 / 2.0
        };
        let observed_hz = 1000.0 / median_ms;
        if ((observed_hz - rate) / rate).abs() > RATE_TOLERANCE {
            return Err(TraceError::RateMismatch {
                declared_hz: rate,
                observed_hz,
            });
        }
    }
    PressureTrace::new(rate, start_ms, samples)
}

fn parse_header(line: &str) -> Result<(f64, i64), TraceError> {
    let body = line
        .trim()
        .strip_prefix('#')
        .ok_or(TraceError::MissingHeader)?
        .trim();
    let mut rate = None;
    let mut start = None;
    for part in body.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| TraceError::MalformedHeader(format!("bad field {part:?}")))?;
        match key.trim() {
            "rate_hz" => {
                rate = Some(value.trim().parse::<f64>().map_err(|_| {
                    TraceError::MalformedHeader(format!("rate_hz {value:?} is not a number"))
                })?)
            }
            "start_ms" => {
                start = Some(value.trim().parse::<i64>().map_err(|_| {
                    TraceError::MalformedHeader(format!("start_ms {value:?} is not an integer"))
                })?)
            }
            other => {
                return Err(TraceError::MalformedHeader(format!(
                    "unknown field {other:?}"
                )))
            }
        }
    }
    let rate = rate.ok_or_else(|| TraceError::MalformedHeader("missing rate_hz".into()))?;
    if !(rate.is_finite() && rate > 0.0) {
        return Err(TraceError::InvalidRate(rate));
    }
    let start = start.ok_or_else(|| TraceError::MalformedHeader("missing start_ms".into()))?;
    Ok((rate, start))
}

/// Ground-truth class of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    SpeakerActive,
    SpeakerInactive,
    Tap,
    NoTap,
    /// Numpad key 1..=9; build through [`Label::key`].
    Key(u8),
}

impl Label {
    pub fn key(k: u8) -> Result<Self, ParseLabelError> {
        if (1..=9).contains(&k) {
            Ok(Label::Key(k))
        } else {
            Err(ParseLabelError(format!("Key({k})")))
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::SpeakerActive => f.write_str("SpeakerActive"),
            Label::SpeakerInactive => f.write_str("SpeakerInactive"),
            Label::Tap => f.write_str("Tap"),
            Label::NoTap => f.write_str("NoTap"),
            Label::Key(k) => write!(f, "Key({k})"),
        }
    }
}

impl FromStr for Label {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SpeakerActive" => Ok(Label::SpeakerActive),
            "SpeakerInactive" => Ok(Label::SpeakerInactive),
            "Tap" => Ok(Label::Tap),
            "NoTap" => Ok(Label::NoTap),
            other => other
                .strip_prefix("Key(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|k| k.parse::<u8>().ok())
                .ok_or_else(|| ParseLabelError(other.to_string()))
                .and_then(|k| Label::key(k).map_err(|_| ParseLabelError(other.to_string()))),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One classification window and its label. `meta` carries provenance
/// (source, offsets, seeds, applied pipeline).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub label: Label,
    pub window: Vec<f64>,
    pub meta: BTreeMap<String, String>,
}

impl LabeledRecord {
    pub fn new(label: Label, window: Vec<f64>) -> Self {
        Self {
            label,
            window,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }
}

/// A homogeneous, validated collection of labeled records.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<LabeledRecord>,
    class_set: Vec<Label>,
    window_len: usize,
}

impl Dataset {
    /// Validates every dataset invariant. The class set keeps the caller's
    /// order; that order defines class indices everywhere downstream.
    pub fn new(
        class_set: Vec<Label>,
        window_len: usize,
        records: Vec<LabeledRecord>,
    ) -> Result<Self, DatasetError> {
        if window_len == 0 {
            return Err(DatasetError::ZeroWindowLen);
        }
        let mut seen = BTreeSet::new();
        for c in &class_set {
            if !seen.insert(*c) {
                return Err(DatasetError::DuplicateClass(*c));
            }
        }
        for (index, r) in records.iter().enumerate() {
            if !seen.contains(&r.label) {
                return Err(DatasetError::LabelNotInClassSet {
                    index,
                    label: r.label,
                });
            }
            if r.window.len() != window_len {
                return Err(DatasetError::WindowLength {
                    index,
                    expected: window_len,
                    found: r.window.len(),
                });
            }
            if r.window.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::NonFinite { index });
            }
        }
        Ok(Self {
            records,
            class_set,
            window_len,
        })
    }

    pub fn records(&self) -> &[LabeledRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LabeledRecord> {
        self.records
    }

    pub fn class_set(&self) -> &[Label] {
        &self.class_set
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_index(&self, label: Label) -> Option<usize> {
        self.class_set.iter().position(|c| *c == label)
    }

    /// Class index of every record, in record order.
    pub fn label_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| self.class_index(r.label).expect("validated on construction"))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_set.len()];
        for i in self.label_indices() {
            counts[i] += 1;
        }
        counts
    }

    /// A dataset holding the records at `indices` (in that order) with the
    /// same class set and window length.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            class_set: self.class_set.clone(),
            window_len: self.window_len,
        }
    }

    /// Content hash over class set, labels and window bits.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.window_len as u64).to_le_bytes());
        for c in &self.class_set {
            h.update(c.to_string().as_bytes());
            h.update([0u8]);
        }
        for r in &self.records {
            h.update(r.label.to_string().as_bytes());
            for v in &r.window {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    window_len: usize,
    classes: Vec<Label>,
    version: u32,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    label: Label,
    window: &'a [f64],
    meta: &'a BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RecordIn {
    label: String,
    window: Vec<f64>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Writes the dataset JSONL format: a header line followed by one line per
/// record. Floats are written in shortest round-trip form.
pub fn write_dataset_to<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    let header = HeaderLine {
        window_len: dataset.window_len,
        classes: dataset.class_set.clone(),
        version: DATASET_FORMAT_VERSION,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in &dataset.records {
        let line = RecordOut {
            label: r.label,
            window: &r.window,
            meta: &r.meta,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dataset(dataset: &Dataset) -> String {
    let mut buf = Vec::new();
    write_dataset_to(dataset, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Parses the dataset JSONL format. Errors name the 1-based line number.
pub fn read_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, htext) = lines.next().ok_or(DatasetError::MissingHeader)?;
    let header: HeaderLine =
        serde_json::from_str(htext).map_err(|e| DatasetError::Malformed {
            line: hline,
            reason: e.to_string(),
        })?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion {
            line: hline,
            version: header.version,
        });
    }

    let mut records = Vec::new();
    for (line, text) in lines {
        let rec: RecordIn = serde_json::from_str(text).map_err(|e| DatasetError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        let label: Label = rec
            .label
            .parse()
            .map_err(|_| DatasetError::UnknownLabel {
                line,
                label: rec.label.clone(),
            })?;
        if !header.classes.contains(&label) {
            return Err(DatasetError::UnknownLabel {
                line,
                label: rec.label,
            });
        }
        if rec.window.len() != header.window_len {
            return Err(DatasetError::LineWindowLength {
                line,
                expected: header.window_len,
                found: rec.window.len(),
            });
        }
        records.push(LabeledRecord {
            label,
            window: rec.window,
            meta: rec.meta,
        });
    }
    Dataset::new(header.classes, header.window_len, records)
}
