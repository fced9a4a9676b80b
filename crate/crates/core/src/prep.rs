//! Record segmentation and per-record preprocessing (z-score standardization
//! and Savitzky-Golay smoothing).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Dataset, DatasetError, Label, LabeledRecord, PressureTrace};

/// Population standard deviation below which a window counts as constant.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrepError {
    #[error("window of length {0} is too short to standardize")]
    TooShortToStandardize(usize),
    #[error("window of length {len} is shorter than the filter frame {frame}")]
    WindowShorterThanFrame { len: usize, frame: usize },
    #[error("frame size {0} must be odd")]
    EvenFrame(usize),
    #[error("polynomial order {order} must be smaller than frame {frame}")]
    OrderTooHigh { order: usize, frame: usize },
    #[error("invalid segmentation protocol: {0}")]
    Protocol(String),
    #[error("no events to segment")]
    NoEvents,
    #[error("cannot parse pipeline {0:?}")]
    Pipeline(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Output of [`standardize`]. `degenerate` is set when the input was constant
/// and the all-zero window was returned.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// Replaces each value by its z-score using the window's mean and population
/// standard deviation (divide by n).
pub fn standardize(window: &[f64]) -> Result<Standardized, PrepError> {
    let n = window.len();
    if n < 2 {
        return Err(PrepError::TooShortToStandardize(n));
    }
    // Work on values centered by a rough mean so that the final mean is
    // representable to full precision even when the spread is tiny compared
    // to the level (hPa readings near 1013 varying by 1e-3).
    let rough = window.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = window.iter().map(|v| v - rough).collect();
    let shift = centered.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = centered.iter().map(|c| c - shift).collect();
    let var = dev.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(Standardized {
            values: vec![0.0; n],
            degenerate: true,
        });
    }
    Ok(Standardized {
        values: dev.iter().map(|d| d / std).collect(),
        degenerate: false,
    })
}

/// Convolution weights of the Savitzky-Golay smoother: least-squares fit of a
/// polynomial of degree `order` over `frame` centered points, evaluated at the
/// center. Solves the normal equations of the Vandermonde system.
pub fn savgol_coefficients(order: usize, frame: usize) -> Result<Vec<f64>, PrepError> {
    if frame.is_multiple_of(2) {
        return Err(PrepError::EvenFrame(frame));
    }
    if order >= frame {
        return Err(PrepError::OrderTooHigh { order, frame });
    }
    let half = (frame / 2) as i64;
    let m = order + 1;
    // Gram matrix G = J^T J, J[i][p] = x_i^p with x_i in -half..=half
    let mut gram = vec![vec![0.0; m]; m];
    for x in -half..=half {
        let xf = x as f64;
        for p in 0..m {
            for q in 0..m {
                gram[p][q] += xf.powi((p + q) as i32);
            }
        }
    }
    // The center value of the fit is e0^T G^{-1} J^T y, so the weights are
    // J u where u solves G u = e0.
    let mut rhs = vec![0.0; m];
    rhs[0] = 1.0;
    let u = solve_dense(gram, rhs);
    Ok((-half..=half)
        .map(|x| {
            let xf = x as f64;
            (0..m).map(|p| u[p] * xf.powi(p as i32)).sum()
        })
        .collect())
}

/// Gaussian elimination with partial pivoting for the small SPD systems above.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Savitzky-Golay smoothing with mirror padding at both ends (reflection
/// without repeating the edge sample), so the output has the input's length.
pub fn savgol(window: &[f64], order: usize, frame: usize) -> Result<Vec<f64>, PrepError> {
    let coeffs = savgol_coefficients(order, frame)?;
    let n = window.len();
    if n < frame {
        return Err(PrepError::WindowShorterThanFrame { len: n, frame });
    }
    let half = (frame / 2) as isize;
    let last = n as isize - 1;
    let at = |i: isize| -> f64 {
        let j = if i < 0 {
            -i
        } else if i > last {
            2 * last - i
        } else {
            i
        };
        window[j as usize]
    };
    Ok((0..n as isize)
        .map(|i| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * at(i + k as isize - half))
                .sum()
        })
        .collect())
}

/// One step of a preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Standardize,
    Savgol { order: usize, frame: usize },
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Standardize => f.write_str("std"),
            Transform::Savgol { order, frame } => write!(f, "savgol({order},{frame})"),
        }
    }
}

/// A preprocessing chain, written as transform names joined by `|` with
/// parameters in parentheses, e.g. `std` or `std|savgol(2,5)`. The empty
/// string (or `none`) is the identity chain.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pipeline(pub Vec<Transform>);

impl Pipeline {
    pub fn standardize() -> Self {
        Pipeline(vec![Transform::Standardize])
    }

    pub fn standardize_savgol() -> Self {
        Pipeline(vec![
            Transform::Standardize,
            Transform::Savgol { order: 2, frame: 5 },
        ])
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.0
    }

    /// Applies the chain to one window. The flag reports whether a
    /// standardization step met a constant window.
    pub fn apply(&self, window: &[f64]) -> Result<(Vec<f64>, bool), PrepError> {
        let mut values = window.to_vec();
        let mut degenerate = false;
        for t in &self.0 {
            values = match *t {
                Transform::Standardize => {
                    let s = standardize(&values)?;
                    degenerate |= s.degenerate;
                    s.values
                }
                Transform::Savgol { order, frame } => savgol(&values, order, frame)?,
            };
        }
        Ok((values, degenerate))
    }

    /// Applies the chain record by record and notes it in each record's meta
    /// under `pipeline`. Returns the new dataset and the number of degenerate
    /// (constant) windows met.
    pub fn apply_dataset(&self, dataset: &Dataset) -> Result<(Dataset, usize), PrepError> {
        let mut degenerate = 0;
        let mut records = Vec::with_capacity(dataset.len());
        for r in dataset.records() {
            let (window, flag) = self.apply(&r.window)?;
            degenerate += flag as usize;
            let mut meta = r.meta.clone();
            meta.insert("pipeline".into(), self.to_string());
            records.push(LabeledRecord {
                label: r.label,
                window,
                meta,
            });
        }
        let out = Dataset::new(dataset.class_set().to_vec(), dataset.window_len(), records)?;
        Ok((out, degenerate))
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join("|"))
    }
}

impl FromStr for Pipeline {
    type Err = PrepError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Pipeline::default());
        }
        let err = || PrepError::Pipeline(s.to_string());
        let mut out = Vec::new();
        for part in s.split('|') {
            let part = part.trim();
            let (name, args) = match part.split_once('(') {
                Some((name, rest)) => (name.trim(), Some(rest.strip_suffix(')').ok_or_else(err)?)),
                None => (part, None),
            };
            let t = match (name, args) {
                ("std", None) => Transform::Standardize,
                ("savgol", None) => Transform::Savgol { order: 2, frame: 5 },
                ("savgol", Some(a)) => {
                    let (o, f) = a.split_once(',').ok_or_else(err)?;
                    let order: usize = o.trim().parse().map_err(|_| err())?;
                    let frame: usize = f.trim().parse().map_err(|_| err())?;
                    if frame.is_multiple_of(2) || order >= frame {
                        return Err(err());
                    }
                    Transform::Savgol { order, frame }
                }
                _ => return Err(err()),
            };
            out.push(t);
        }
        Ok(Pipeline(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolKind {
    /// One record per scheduled activity/inactivity block.
    AlternatingBlocks,
    /// One record per event, starting `pre_event_s` before it.
    EventWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationProtocol {
    pub kind: ProtocolKind,
    pub block_s: f64,
    pub rest_s: f64,
    pub pre_event_s: f64,
    pub window_s: f64,
}

impl Default for SegmentationProtocol {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::EventWindow,
            block_s: 10.0,
            rest_s: 2.0,
            pre_event_s: 1.0,
            window_s: 2.0,
        }
    }
}

impl SegmentationProtocol {
    pub fn event_window(pre_event_s: f64, window_s: f64) -> Self {
        Self {
            kind: ProtocolKind::EventWindow,
            pre_event_s,
            window_s,
            ..Self::default()
        }
    }

    pub fn alternating_blocks(block_s: f64, rest_s: f64) -> Self {
        Self {
            kind: ProtocolKind::AlternatingBlocks,
            block_s,
            rest_s,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        let durations = [self.block_s, self.rest_s, self.pre_event_s, self.window_s];
        if durations.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(PrepError::Protocol("all durations must be positive".into()));
        }
        if self.pre_event_s >= self.window_s {
            return Err(PrepError::Protocol("pre_event_s must be < window_s".into()));
        }
        Ok(())
    }

    /// Samples per record at `rate_hz`.
    pub fn record_len(&self, rate_hz: f64) -> usize {
        let span = match self.kind {
            ProtocolKind::AlternatingBlocks => self.block_s,
            ProtocolKind::EventWindow => self.window_s,
        };
        (span * rate_hz).round() as usize
    }
}

/// Result of [`segment`].
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub records: Vec<LabeledRecord>,
    /// Events whose window fell outside the trace.
    pub dropped: usize,
    /// Emitted event windows that overlap the previous emitted window.
    pub overlapping: usize,
}

/// Cuts labeled records out of a trace.
///
/// `events` holds `(time_s, label)` pairs with times relative to the first
/// sample. For block protocols each pair is a block start; for event windows it
/// is the event instant. A record covers the samples whose times fall in the
/// half-open span `[start, start + length)`.
pub fn segment(
    trace: &PressureTrace,
    protocol: &SegmentationProtocol,
    events: &[(f64, Label)],
) -> Result<Segmentation, PrepError> {
    protocol.validate()?;
    if events.is_empty() {
        return Err(PrepError::NoEvents);
    }
    let rate = trace.sample_rate_hz();
    let len = protocol.record_len(rate);
    if len == 0 {
        return Err(PrepError::Protocol("record shorter than one sample".into()));
    }
    let mut out = Segmentation {
        records: Vec::new(),
        dropped: 0,
        overlapping: 0,
    };
    let mut prev_end: Option<i64> = None;
    for &(t, label) in events {
        let start_s = match protocol.kind {
            ProtocolKind::AlternatingBlocks => t,
            ProtocolKind::EventWindow => t - protocol.pre_event_s,
        };
        // first sample at or after start_s, tolerant to float noise
        let start = (start_s * rate - 1e-9).ceil() as i64;
        let end = start + len as i64;
        if !t.is_finite() || start < 0 || end > trace.len() as i64 {
            out.dropped += 1;
            continue;
        }
        if protocol.kind == ProtocolKind::EventWindow {
            if let Some(pe) = prev_end {
                if start < pe {
                    out.overlapping += 1;
                }
            }
        }
        prev_end = Some(end);
        let window = trace.samples()[start as usize..end as usize].to_vec();
        out.records.push(
            LabeledRecord::new(label, window)
                .with_meta("offset_s", trace.offset_s(start as usize))
                .with_meta("event_s", t),
        );
    }
    Ok(out)
}
