//! ROC / AUROC / accuracy and seed-ensemble averaging over prediction sets.

mod io;

pub use io::{read_predictions, roc_to_csv, write_predictions, write_roc_csv};

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("predictions carry no labels")]
    MissingLabels,
    #[error("ROC is undefined: need at least one positive and one negative (got {positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("no predictions")]
    Empty,
    #[error("invalid predictions: {0}")]
    Invalid(String),
    #[error("ensemble needs at least one run")]
    NoRuns,
    #[error("id sets differ between runs; symmetric difference (first 10): {0:?}")]
    IdMismatch(Vec<String>),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parallel ids / hateful-class probabilities / optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub probs: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

impl Predictions {
    pub fn new(ids: Vec<String>, probs: Vec<f64>, labels: Option<Vec<u8>>) -> Result<Self, EvalError> {
        let p = Self { ids, probs, labels };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.ids.len() != self.probs.len() || self.labels.as_ref().is_some_and(|l| l.len() != self.ids.len()) {
            return Err(EvalError::Invalid(
                "ids, probabilities and labels must have equal length".into(),
            ));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(EvalError::Invalid(format!("probability {p} outside [0,1]")));
        }
        if let Some(l) = self.labels.iter().flatten().find(|&&l| l > 1) {
            return Err(EvalError::Invalid(format!("label {l} is not binary")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn labels(&self) -> Result<&[u8], EvalError> {
        self.labels.as_deref().ok_or(EvalError::MissingLabels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are predicted positive; `+inf` for the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub accuracy: f64,
    pub n: usize,
    pub positives: usize,
    pub negatives: usize,
    #[serde(skip)]
    pub curve: RocCurve,
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

/// Threshold sweep over the unique scores, highest first. Tied scores cross
/// the threshold together, so a tie group contributes one diagonal segment.
pub fn roc_curve(preds: &Predictions) -> Result<RocCurve, EvalError> {
    preds.validate()?;
    let labels = preds.labels()?;
    let (positives, negatives) = class_counts(labels);
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds.probs[b].partial_cmp(&preds.probs[a]).unwrap_or(Ordering::Equal));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = preds.probs[order[i]];
        while i < order.len() && preds.probs[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under [`roc_curve`].
pub fn auroc(preds: &Predictions) -> Result<f64, EvalError> {
    let curve = roc_curve(preds)?;
    Ok(curve_area(&curve))
}

pub fn curve_area(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Mann-Whitney statistic: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Quadratic; used to cross-check [`auroc`].
pub fn auroc_pairwise(preds: &Predictions) -> Result<f64, EvalError> {
    preds.validate()?;
    let labels = preds.labels()?;
    let (positives, negatives) = class_counts(labels);
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let pos: Vec<f64> = preds
        .probs
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(p, _)| *p)
        .collect();
    let neg: Vec<f64> = preds
        .probs
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(p, _)| *p)
        .collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (positives as f64 * negatives as f64))
}

/// Fraction of samples where `[p >= threshold]` equals the label.
pub fn accuracy(preds: &Predictions, threshold: f64) -> Result<f64, EvalError> {
    preds.validate()?;
    let labels = preds.labels()?;
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = preds
        .probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| u8::from(p >= threshold) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean negative log-likelihood of the labels.
pub fn mean_nll(preds: &Predictions) -> Result<f64, EvalError> {
    preds.validate()?;
    let labels = preds.labels()?;
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: f64 = preds
        .probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| -(if y == 1 { p } else { 1.0 - p }).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Per-id arithmetic mean of probabilities across runs, in the first run's
/// id order. Labels come from the first run that has them.
pub fn ensemble_average(runs: &[Predictions]) -> Result<Predictions, EvalError> {
    let first = runs.first().ok_or(EvalError::NoRuns)?;
    for r in runs {
        r.validate()?;
    }
    let base: BTreeSet<&str> = first.ids.iter().map(String::as_str).collect();
    if base.len() != first.len() {
        return Err(EvalError::Invalid("duplicate ids in a prediction set".into()));
    }
    let mut lookups = Vec::with_capacity(runs.len());
    for r in runs {
        let ids: BTreeSet<&str> = r.ids.iter().map(String::as_str).collect();
        if ids != base || ids.len() != r.len() {
            let diff: Vec<String> = base
                .symmetric_difference(&ids)
                .take(10)
                .map(|s| s.to_string())
                .collect();
            return Err(EvalError::IdMismatch(diff));
        }
        let map: HashMap<&str, usize> = r.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        lookups.push(map);
    }
    let probs = first
        .ids
        .iter()
        .map(|id| {
            let sum: f64 = runs.iter().zip(&lookups).map(|(r, m)| r.probs[m[id.as_str()]]).sum();
            sum / runs.len() as f64
        })
        .collect();
    let labels = runs.iter().zip(&lookups).find_map(|(r, m)| {
        r.labels
            .as_ref()
            .map(|l| first.ids.iter().map(|id| l[m[id.as_str()]]).collect())
    });
    Predictions::new(first.ids.clone(), probs, labels)
}

pub fn evaluate(preds: &Predictions) -> Result<EvalReport, EvalError> {
    let curve = roc_curve(preds)?;
    let labels = preds.labels()?;
    let (positives, negatives) = class_counts(labels);
    Ok(EvalReport {
        auroc: curve_area(&curve),
        accuracy: accuracy(preds, 0.5)?,
        n: preds.len(),
        positives,
        negatives,
        curve,
    })
}
