//! Stratified k-fold cross-validation with repeats, and confusion reporting.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prep::{Pipeline, PrepError};
use crate::sim::RNG_ALGORITHM;
use crate::svm::{self, SvmError, SvmParams};
use crate::trace::{Dataset, Label};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("class {label} has {count} records, fewer than k = {k}")]
    ClassTooSmall { label: Label, count: usize, k: usize },
    #[error("training failed in repeat {repeat}, fold {fold}: {source}")]
    Train {
        repeat: usize,
        fold: usize,
        source: SvmError,
    },
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error("malformed report: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold of each record, by record index.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// Shuffles each class with the seeded generator and deals its records to
/// folds round-robin. Each class starts dealing where the previous one
/// stopped, so leftover records spread over different folds.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    let labels = dataset.label_indices();
    let counts = dataset.class_counts();
    for (label, &count) in dataset.class_set().iter().zip(&counts) {
        if count < k {
            return Err(EvalError::ClassTooSmall {
                label: *label,
                count,
                k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; labels.len()];
    let mut next = 0;
    for class in 0..counts.len() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignments[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<Label>,
    /// `counts[i][j]`: records of true class j predicted as class i.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<Label>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn add(&mut self, predicted: usize, truth: usize) {
        self.counts[predicted][truth] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn column_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }

    /// Micro accuracy, `trace / total`.
    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }
}

/// Column-normalized confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionProbabilities {
    /// `values[i][j]`: probability of predicting class i when the truth is j.
    pub values: Vec<Vec<f64>>,
    /// True classes with no test records; their columns are all zero.
    pub empty_columns: Vec<usize>,
}

impl ConfusionProbabilities {
    pub fn mean_diagonal(&self) -> f64 {
        let k = self.values.len();
        (0..k).map(|i| self.values[i][i]).sum::<f64>() / k as f64
    }
}

pub fn confusion_probabilities(matrix: &ConfusionMatrix) -> ConfusionProbabilities {
    let k = matrix.classes.len();
    let mut values = vec![vec![0.0; k]; k];
    let mut empty_columns = Vec::new();
    for j in 0..k {
        let sum = matrix.column_sum(j);
        if sum == 0 {
            empty_columns.push(j);
            continue;
        }
        for i in 0..k {
            values[i][j] = matrix.counts[i][j] as f64 / sum as f64;
        }
    }
    ConfusionProbabilities {
        values,
        empty_columns,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub report_version: u32,
    pub rng: String,
    pub k: usize,
    pub repeats: usize,
    /// Fold seed of repeat r is `seed + r`.
    pub seed: u64,
    pub fold_seeds: Vec<u64>,
    pub params: SvmParams,
    pub pipeline: String,
    pub dataset_fingerprint: String,
    pub n_records: usize,
    pub degenerate_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_run_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Accuracy of each fold, grouped by repeat.
    pub fold_accuracy: Vec<Vec<f64>>,
    pub confusion: ConfusionMatrix,
    pub confusion_prob: ConfusionProbabilities,
    pub meta: ReportMeta,
}

struct FoldResult {
    accuracy: f64,
    confusion: ConfusionMatrix,
}

fn run_fold(
    dataset: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    params: &SvmParams,
) -> Result<FoldResult, SvmError> {
    let train = dataset.subset(&plan.train_indices(fold));
    let model = svm::train(&train, params)?;
    let mut confusion = ConfusionMatrix::new(dataset.class_set().to_vec());
    let labels = dataset.label_indices();
    for i in plan.test_indices(fold) {
        let predicted = model.predict(&dataset.records()[i].window)?;
        let p = dataset
            .class_index(predicted)
            .expect("model classes come from the dataset");
        confusion.add(p, labels[i]);
    }
    Ok(FoldResult {
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// Repeated stratified k-fold cross-validation.
///
/// The pipeline runs once per record before folding; it only looks at one
/// window at a time, so no information crosses folds. Repeat r uses fold seed
/// `seed + r`; the SVM keeps `params.seed`. Jobs run in parallel but results
/// are merged in (repeat, fold) order.
pub fn cross_validate(
    dataset: &Dataset,
    k: usize,
    repeats: usize,
    params: &SvmParams,
    pipeline: &Pipeline,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if repeats == 0 {
        return Err(EvalError::NoRepeats);
    }
    params.validate().map_err(|source| EvalError::Train {
        repeat: 0,
        fold: 0,
        source,
    })?;
    let (prepared, degenerate) = pipeline.apply_dataset(dataset)?;
    let fold_seeds: Vec<u64> = (0..repeats as u64).map(|r| seed.wrapping_add(r)).collect();
    let plans = fold_seeds
        .iter()
        .map(|&s| stratified_kfold(&prepared, k, s))
        .collect::<Result<Vec<_>, _>>()?;

    let jobs: Vec<(usize, usize)> = (0..repeats)
        .flat_map(|r| (0..k).map(move |f| (r, f)))
        .collect();
    let results: Vec<Result<FoldResult, EvalError>> = jobs
        .par_iter()
        .map(|&(repeat, fold)| {
            run_fold(&prepared, &plans[repeat], fold, params)
                .map_err(|source| EvalError::Train { repeat, fold, source })
        })
        .collect();

    let mut confusion = ConfusionMatrix::new(prepared.class_set().to_vec());
    let mut fold_accuracy = vec![Vec::with_capacity(k); repeats];
    for (res, &(repeat, _)) in results.into_iter().zip(&jobs) {
        let res = res?;
        confusion.merge(&res.confusion);
        fold_accuracy[repeat].push(res.accuracy);
    }
    let per_run_accuracy: Vec<f64> = fold_accuracy
        .iter()
        .map(|f| f.iter().sum::<f64>() / f.len() as f64)
        .collect();
    let mean_accuracy = per_run_accuracy.iter().sum::<f64>() / repeats as f64;
    let confusion_prob = confusion_probabilities(&confusion);
    Ok(EvalReport {
        per_run_accuracy,
        mean_accuracy,
        fold_accuracy,
        confusion,
        confusion_prob,
        meta: ReportMeta {
            report_version: REPORT_FORMAT_VERSION,
            rng: RNG_ALGORITHM.to_string(),
            k,
            repeats,
            seed,
            fold_seeds,
            params: *params,
            pipeline: pipeline.to_string(),
            dataset_fingerprint: dataset.fingerprint(),
            n_records: dataset.len(),
            degenerate_windows: degenerate,
        },
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Malformed(e.to_string()))
    }

    /// Probability matrix as CSV: one row per predicted class, one column per
    /// true class.
    pub fn probability_csv(&self) -> String {
        let classes = &self.confusion.classes;
        let mut s = String::from("predicted\\true");
        for c in classes {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for (i, c) in classes.iter().enumerate() {
            s.push_str(&c.to_string());
            for v in &self.confusion_prob.values[i] {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Long-format probabilities: `predicted,true,probability`.
    pub fn tidy_probability_csv(&self) -> String {
        let classes = &self.confusion.classes;
        let mut s = String::from("predicted,true,probability\n");
        for (i, p) in classes.iter().enumerate() {
            for (j, t) in classes.iter().enumerate() {
                writeln!(s, "{p},{t},{}", self.confusion_prob.values[i][j]).unwrap();
            }
        }
        s
    }

    /// Percent table for the terminal, rows predicted, columns true.
    pub fn format_probabilities(&self) -> String {
        let classes = &self.confusion.classes;
        let names: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:>width$}", "pred\\true");
        for n in &names {
            write!(s, " {n:>width$}").unwrap();
        }
        s.push('\n');
        for (i, n) in names.iter().enumerate() {
            write!(s, "{n:>width$}").unwrap();
            for v in &self.confusion_prob.values[i] {
                write!(s, " {:>width$}", format!("{:.1}%", v * 100.0)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}
