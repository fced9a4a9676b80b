//! Soft-margin SVM trained with simplified SMO, with one-vs-one voting for
//! more than two classes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Task;
use crate::trace::{Dataset, Label};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Sweeps over the training set after which SMO gives up even if
/// `max_passes` quiet passes were never reached.
const MAX_SWEEPS: usize = 10_000;
/// Minimum relative change of a coefficient for a step to count.
const STEP_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvmError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("training needs at least two classes with records, found {0}")]
    SingleClass(usize),
    #[error("binary training needs exactly 2 classes, dataset has {0}")]
    NotBinary(usize),
    #[error("class {label} has {count} records, need at least {needed}")]
    TooFewRecords {
        label: Label,
        count: usize,
        needed: usize,
    },
    #[error("non-finite feature in record {0}")]
    NonFinite(usize),
    #[error("window has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed model: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    /// `gamma: None` picks `1 / (d * var)` from the training features.
    Rbf { gamma: Option<f64> },
}

impl Kernel {
    #[inline]
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma.expect("resolved before use") * d2).exp()
            }
        }
    }

    fn resolve(self, rows: &[&[f64]]) -> Kernel {
        match self {
            Kernel::Rbf { gamma: None } => {
                let d = rows.first().map_or(1, |r| r.len()).max(1);
                let n = (rows.len() * d) as f64;
                let mean = rows.iter().flat_map(|r| r.iter()).sum::<f64>() / n;
                let var = rows
                    .iter()
                    .flat_map(|r| r.iter())
                    .map(|v| (v - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let var = if var > 0.0 { var } else { 1.0 };
                Kernel::Rbf {
                    gamma: Some(1.0 / (d as f64 * var)),
                }
            }
            k => k,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Linear => f.write_str("linear"),
            Kernel::Rbf { gamma: None } => f.write_str("rbf"),
            Kernel::Rbf { gamma: Some(g) } => write!(f, "rbf:{g}"),
        }
    }
}

impl FromStr for Kernel {
    type Err = SvmError;

    /// `linear`, `rbf` (automatic gamma) or `rbf:<gamma>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SvmError::Params(format!("unknown kernel {s:?}"));
        match s.trim() {
            "linear" => Ok(Kernel::Linear),
            "rbf" => Ok(Kernel::Rbf { gamma: None }),
            other => {
                let g = other.strip_prefix("rbf:").ok_or_else(bad)?;
                let gamma: f64 = g.trim().parse().map_err(|_| bad())?;
                Ok(Kernel::Rbf { gamma: Some(gamma) })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    pub kernel: Kernel,
    pub c: f64,
    pub tol: f64,
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            kernel: Kernel::Linear,
            c: 1.0,
            tol: 1e-3,
            max_passes: 10,
            seed: 0,
        }
    }
}

impl SvmParams {
    /// Linear for the binary tasks, automatic-gamma RBF for key position.
    pub fn for_task(task: Task) -> Self {
        let kernel = match task {
            Task::KeyPosition => Kernel::Rbf { gamma: None },
            _ => Kernel::Linear,
        };
        Self {
            kernel,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SvmError> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(SvmError::Params(format!("c must be positive, got {}", self.c)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(SvmError::Params(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_passes == 0 {
            return Err(SvmError::Params("max_passes must be at least 1".into()));
        }
        if let Kernel::Rbf { gamma: Some(g) } = self.kernel {
            if !(g.is_finite() && g > 0.0) {
                return Err(SvmError::Params(format!("gamma must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

/// Solution of the dual problem on one training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    /// Σα − ½ αᵀQα with Q_ij = y_i y_j K_ij.
    pub objective: f64,
    /// Largest KKT violation over the training points.
    pub max_kkt_violation: f64,
    pub sweeps: usize,
}

/// Dual objective for a row-major Gram matrix.
pub fn dual_objective(alpha: &[f64], y: &[f64], gram: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        let row = &gram[i * n..(i + 1) * n];
        let s: f64 = (0..n).map(|j| alpha[j] * y[j] * row[j]).sum();
        quad += alpha[i] * y[i] * s;
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// Row-major Gram matrix of `rows` under `kernel` (which must be resolved).
pub fn gram_matrix(kernel: &Kernel, rows: &[&[f64]]) -> Vec<f64> {
    let n = rows.len();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(rows[i], rows[j]);
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    g
}

struct Smo<'a> {
    gram: &'a [f64],
    y: &'a [f64],
    c: f64,
    n: usize,
    alpha: Vec<f64>,
    b: f64,
    /// Current decision value f_i = Σ α_j y_j K_ij + b.
    f: Vec<f64>,
}

impl Smo<'_> {
    #[inline]
    fn k(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.n + j]
    }

    fn take_step(&mut self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let (yi, yj) = (self.y[i], self.y[j]);
        let (ai, aj) = (self.alpha[i], self.alpha[j]);
        let (ei, ej) = (self.f[i] - yi, self.f[j] - yj);
        let c = self.c;
        let (lo, hi) = if yi != yj {
            ((aj - ai).max(0.0), (c + aj - ai).min(c))
        } else {
            ((ai + aj - c).max(0.0), (ai + aj).min(c))
        };
        if hi - lo < 1e-12 {
            return false;
        }
        let eta = 2.0 * self.k(i, j) - self.k(i, i) - self.k(j, j);
        // gain in the dual objective for a change t of alpha_j
        let gain = |t: f64| yj * (ei - ej) * t + 0.5 * eta * t * t;
        let mut aj_new = if eta < 0.0 {
            (aj - yj * (ei - ej) / eta).clamp(lo, hi)
        } else {
            let (gl, gh) = (gain(lo - aj), gain(hi - aj));
            if gl > gh + 1e-12 {
                lo
            } else if gh > gl + 1e-12 {
                hi
            } else {
                return false;
            }
        };
        if aj_new < 1e-12 * c {
            aj_new = 0.0;
        } else if aj_new > c * (1.0 - 1e-12) {
            aj_new = c;
        }
        if (aj_new - aj).abs() < STEP_EPS * (aj_new + aj + STEP_EPS) {
            return false;
        }
        let mut ai_new = ai + yi * yj * (aj - aj_new);
        if ai_new < 1e-12 * c {
            ai_new = 0.0;
        } else if ai_new > c * (1.0 - 1e-12) {
            ai_new = c;
        }
        let (dai, daj) = (ai_new - ai, aj_new - aj);
        let b1 = self.b - ei - yi * dai * self.k(i, i) - yj * daj * self.k(i, j);
        let b2 = self.b - ej - yi * dai * self.k(i, j) - yj * daj * self.k(j, j);
        let b_new = if ai_new > 0.0 && ai_new < c {
            b1
        } else if aj_new > 0.0 && aj_new < c {
            b2
        } else {
            0.5 * (b1 + b2)
        };
        let db = b_new - self.b;
        let n = self.n;
        let (ri, rj) = (&self.gram[i * n..(i + 1) * n], &self.gram[j * n..(j + 1) * n]);
        for (k, fk) in self.f.iter_mut().enumerate() {
            *fk += yi * dai * ri[k] + yj * daj * rj[k] + db;
        }
        self.alpha[i] = ai_new;
        self.alpha[j] = aj_new;
        self.b = b_new;
        true
    }

    fn violates(&self, i: usize, tol: f64) -> bool {
        let r = self.y[i] * (self.f[i] - self.y[i]);
        (r < -tol && self.alpha[i] < self.c) || (r > tol && self.alpha[i] > 0.0)
    }

    /// Bias from the free support vectors, or the midpoint of the feasible
    /// interval when every coefficient sits on a bound.
    fn final_bias(&self) -> f64 {
        let (mut sum, mut free) = (0.0, 0usize);
        let (mut lower, mut upper) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..self.n {
            let v = self.y[i] - (self.f[i] - self.b);
            let a = self.alpha[i];
            if a > 0.0 && a < self.c {
                sum += v;
                free += 1;
            } else if (a == 0.0) == (self.y[i] > 0.0) {
                lower = lower.max(v);
            } else {
                upper = upper.min(v);
            }
        }
        if free > 0 {
            sum / free as f64
        } else if lower.is_finite() && upper.is_finite() {
            0.5 * (lower + upper)
        } else if lower.is_finite() {
            lower
        } else if upper.is_finite() {
            upper
        } else {
            self.b
        }
    }
}

/// KKT violation of one point given its decision value.
fn kkt_violation(alpha: f64, c: f64, y: f64, f: f64) -> f64 {
    let r = y * f - 1.0;
    if alpha <= 0.0 {
        (-r).max(0.0)
    } else if alpha >= c {
        r.max(0.0)
    } else {
        r.abs()
    }
}

/// Runs simplified SMO on a precomputed Gram matrix with labels in {−1, +1}.
///
/// Each KKT violator is paired with a random partner first; if that makes no
/// progress every other index is tried, starting from a random offset.
pub fn solve_dual(gram: &[f64], y: &[f64], params: &SvmParams, rng: &mut ChaCha8Rng) -> DualSolution {
    let n = y.len();
    assert_eq!(gram.len(), n * n, "gram matrix must be n x n");
    let mut smo = Smo {
        gram,
        y,
        c: params.c,
        n,
        alpha: vec![0.0; n],
        b: 0.0,
        f: vec![0.0; n],
    };
    let mut passes = 0;
    let mut sweeps = 0;
    while passes < params.max_passes && sweeps < MAX_SWEEPS && n > 1 {
        sweeps += 1;
        let mut changed = 0;
        for i in 0..n {
            if !smo.violates(i, params.tol) {
                continue;
            }
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            if smo.take_step(i, j) {
                changed += 1;
                continue;
            }
            let offset = rng.random_range(0..n);
            if (0..n).map(|k| (k + offset) % n).any(|j| smo.take_step(i, j)) {
                changed += 1;
            }
        }
        passes = if changed == 0 { passes + 1 } else { 0 };
    }
    let bias = smo.final_bias();
    let shift = bias - smo.b;
    let max_kkt_violation = (0..n)
        .map(|i| kkt_violation(smo.alpha[i], smo.c, y[i], smo.f[i] + shift))
        .fold(0.0, f64::max);
    let objective = dual_objective(&smo.alpha, y, gram);
    DualSolution {
        alpha: smo.alpha,
        bias,
        objective,
        max_kkt_violation,
        sweeps,
    }
}

/// One binary machine. Negative decisions vote for `negative`, the rest
/// (including exactly zero) for `positive`; both are indices into the model's
/// class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMachine {
    pub negative: usize,
    pub positive: usize,
    pub support_vectors: Vec<Vec<f64>>,
    /// α_i·y_i for each support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
}

impl BinaryMachine {
    fn decision(&self, kernel: &Kernel, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, c)| c * kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub params: SvmParams,
    pub fingerprint: String,
    pub n_records: usize,
    /// Preprocessing applied to windows before training, if recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub version: u32,
    /// Kernel with gamma resolved.
    pub kernel: Kernel,
    pub c: f64,
    pub tol: f64,
    pub classes: Vec<Label>,
    pub dim: usize,
    /// One machine for two classes, k(k−1)/2 in (a, b) order for more.
    pub machines: Vec<BinaryMachine>,
    pub train_meta: TrainMeta,
}

/// Full training report for one binary machine, used by tests and
/// diagnostics.
#[derive(Debug, Clone)]
pub struct BinaryFit {
    pub machine: BinaryMachine,
    pub solution: DualSolution,
}

fn check_rows(dataset: &Dataset) -> Result<(), SvmError> {
    for (i, r) in dataset.records().iter().enumerate() {
        if r.window.iter().any(|v| !v.is_finite()) {
            return Err(SvmError::NonFinite(i));
        }
    }
    Ok(())
}

fn fit_pair(
    rows: &[&[f64]],
    labels: &[usize],
    negative: usize,
    positive: usize,
    kernel: &Kernel,
    params: &SvmParams,
    stream: u64,
) -> BinaryFit {
    let idx: Vec<usize> = (0..rows.len())
        .filter(|&i| labels[i] == negative || labels[i] == positive)
        .collect();
    let sub: Vec<&[f64]> = idx.iter().map(|&i| rows[i]).collect();
    let y: Vec<f64> = idx
        .iter()
        .map(|&i| if labels[i] == positive { 1.0 } else { -1.0 })
        .collect();
    let gram = gram_matrix(kernel, &sub);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(stream);
    let solution = solve_dual(&gram, &y, params, &mut rng);
    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    for (k, &a) in solution.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.push(sub[k].to_vec());
            dual_coefs.push(a * y[k]);
        }
    }
    BinaryFit {
        machine: BinaryMachine {
            negative,
            positive,
            support_vectors,
            dual_coefs,
            bias: solution.bias,
        },
        solution,
    }
}

fn class_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|a| (a + 1..k).map(move |b| (a, b)))
        .collect()
}

/// Trains a two-class model and returns the dual solution alongside it.
/// The first class in the dataset's class set is the negative side.
pub fn fit_binary(dataset: &Dataset, params: &SvmParams) -> Result<(SvmModel, BinaryFit), SvmError> {
    params.validate()?;
    let k = dataset.class_set().len();
    if k != 2 {
        return Err(SvmError::NotBinary(k));
    }
    let counts = dataset.class_counts();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(SvmError::SingleClass(present));
    }
    check_rows(dataset)?;
    let rows: Vec<&[f64]> = dataset.records().iter().map(|r| r.window.as_slice()).collect();
    let labels = dataset.label_indices();
    let kernel = params.kernel.resolve(&rows);
    let fit = fit_pair(&rows, &labels, 0, 1, &kernel, params, 0);
    let model = SvmModel {
        version: MODEL_FORMAT_VERSION,
        kernel,
        c: params.c,
        tol: params.tol,
        classes: dataset.class_set().to_vec(),
        dim: dataset.window_len(),
        machines: vec![fit.machine.clone()],
        train_meta: meta(dataset, params),
    };
    Ok((model, fit))
}

fn meta(dataset: &Dataset, params: &SvmParams) -> TrainMeta {
    TrainMeta {
        params: *params,
        fingerprint: dataset.fingerprint(),
        n_records: dataset.len(),
        pipeline: dataset
            .records()
            .first()
            .and_then(|r| r.meta.get("pipeline").cloned()),
    }
}

pub fn train_binary(dataset: &Dataset, params: &SvmParams) -> Result<SvmModel, SvmError> {
    fit_binary(dataset, params).map(|(m, _)| m)
}

/// One-vs-one training of k(k−1)/2 machines, run in parallel.
pub fn train_multiclass(dataset: &Dataset, params: &SvmParams) -> Result<SvmModel, SvmError> {
    params.validate()?;
    let counts = dataset.class_counts();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(SvmError::SingleClass(present));
    }
    for (label, &count) in dataset.class_set().iter().zip(&counts) {
        if count < 2 {
            return Err(SvmError::TooFewRecords {
                label: *label,
                count,
                needed: 2,
            });
        }
    }
    check_rows(dataset)?;
    let rows: Vec<&[f64]> = dataset.records().iter().map(|r| r.window.as_slice()).collect();
    let labels = dataset.label_indices();
    let kernel = params.kernel.resolve(&rows);
    let machines = class_pairs(counts.len())
        .into_par_iter()
        .enumerate()
        .map(|(s, (a, b))| fit_pair(&rows, &labels, a, b, &kernel, params, s as u64).machine)
        .collect();
    Ok(SvmModel {
        version: MODEL_FORMAT_VERSION,
        kernel,
        c: params.c,
        tol: params.tol,
        classes: dataset.class_set().to_vec(),
        dim: dataset.window_len(),
        machines,
        train_meta: meta(dataset, params),
    })
}

/// Binary for two classes, one-vs-one otherwise.
pub fn train(dataset: &Dataset, params: &SvmParams) -> Result<SvmModel, SvmError> {
    if dataset.class_set().len() == 2 {
        train_binary(dataset, params)
    } else {
        train_multiclass(dataset, params)
    }
}

impl SvmModel {
    fn check_dim(&self, window: &[f64]) -> Result<(), SvmError> {
        if window.len() != self.dim {
            return Err(SvmError::DimensionMismatch {
                expected: self.dim,
                got: window.len(),
            });
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.classes.len() == 2
    }

    /// Decision value of each machine, in machine order.
    pub fn decisions(&self, window: &[f64]) -> Result<Vec<f64>, SvmError> {
        self.check_dim(window)?;
        Ok(self
            .machines
            .iter()
            .map(|m| m.decision(&self.kernel, window))
            .collect())
    }

    /// Decision value of the first machine; for binary models its sign picks
    /// the class.
    pub fn decision_function(&self, window: &[f64]) -> Result<f64, SvmError> {
        self.check_dim(window)?;
        Ok(self.machines[0].decision(&self.kernel, window))
    }

    /// Predicted label with the binary decision value, or the winning vote
    /// margin for multiclass models.
    ///
    /// Votes are tallied per class; ties go to the larger summed |decision|
    /// over the votes a class won, then to the lower class index.
    pub fn predict_with_score(&self, window: &[f64]) -> Result<(Label, f64), SvmError> {
        let d = self.decisions(window)?;
        if self.machines.len() == 1 {
            let m = &self.machines[0];
            let idx = if d[0] >= 0.0 { m.positive } else { m.negative };
            return Ok((self.classes[idx], d[0]));
        }
        let k = self.classes.len();
        let mut votes = vec![0usize; k];
        let mut margin = vec![0.0f64; k];
        for (m, v) in self.machines.iter().zip(&d) {
            let w = if *v >= 0.0 { m.positive } else { m.negative };
            votes[w] += 1;
            margin[w] += v.abs();
        }
        let mut best = 0;
        for c in 1..k {
            if votes[c] > votes[best] || (votes[c] == votes[best] && margin[c] > margin[best]) {
                best = c;
            }
        }
        Ok((self.classes[best], margin[best]))
    }

    pub fn predict(&self, window: &[f64]) -> Result<Label, SvmError> {
        self.predict_with_score(window).map(|(l, _)| l)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, SvmError> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe =
            serde_json::from_str(text).map_err(|e| SvmError::Malformed(e.to_string()))?;
        if probe.version != MODEL_FORMAT_VERSION {
            return Err(SvmError::UnsupportedVersion(probe.version));
        }
        let model: SvmModel =
            serde_json::from_str(text).map_err(|e| SvmError::Malformed(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), SvmError> {
        let bad = |m: &str| Err(SvmError::Malformed(m.to_string()));
        let k = self.classes.len();
        if k < 2 {
            return bad("fewer than two classes");
        }
        let expected = if k == 2 { 1 } else { k * (k - 1) / 2 };
        if self.machines.len() != expected {
            return bad("machine count does not match class count");
        }
        if matches!(self.kernel, Kernel::Rbf { gamma: None }) {
            return bad("rbf kernel without gamma");
        }
        for m in &self.machines {
            if m.negative >= k || m.positive >= k || m.negative == m.positive {
                return bad("machine refers to an unknown class");
            }
            if m.support_vectors.len() != m.dual_coefs.len() {
                return bad("support vector and coefficient counts differ");
            }
            if m.support_vectors.iter().any(|sv| sv.len() != self.dim) {
                return bad("support vector dimension differs from model");
            }
        }
        Ok(())
    }
}
