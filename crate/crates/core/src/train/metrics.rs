use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Classification quality on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub f1_macro: f64,
    pub top1: f64,
    pub top3: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    /// Classes absent from the labels; they count as F1 = 0.
    pub zero_support: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Largest over smallest class count; infinite if a class is absent.
    pub imbalance_ratio: f64,
}

/// Position of `label` when classes are sorted by descending logit, ties
/// going to the lower class index.
pub fn label_rank(row: &[f64], label: usize) -> usize {
    let z = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count()
}

/// Highest-scoring class, lowest index on ties.
pub fn predicted_class(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn class_counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &y in labels {
        if y < k {
            counts[y] += 1;
        }
    }
    counts
}

pub fn imbalance_ratio(labels: &[usize], k: usize) -> f64 {
    let counts = class_counts(labels, k);
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let min = counts.iter().copied().min().unwrap_or(0) as f64;
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores `[N, K]` logits against labels.
pub fn metrics(logits: &Tensor, labels: &[usize], k: usize) -> Result<MetricsReport> {
    if k < 2 {
        return Err(Error::Validation(format!("metrics need at least 2 classes, got {k}")));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Validation("metrics of an empty split".into()));
    }
    if logits.shape() != [n, k] {
        return Err(Error::dim(format!(
            "logits {:?} for {n} labels and {k} classes",
            logits.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Validation(format!("label {bad} outside 0..{k}")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut top1, mut top3) = (0usize, 0usize);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        confusion[y][predicted_class(row)] += 1;
        let rank = label_rank(row, y);
        top1 += usize::from(rank < 1);
        top3 += usize::from(rank < 3);
    }
    let support = class_counts(labels, k);
    let predicted: Vec<usize> = (0..k).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
    let precision: Vec<f64> = (0..k).map(|c| ratio(confusion[c][c], predicted[c])).collect();
    let recall: Vec<f64> = (0..k).map(|c| ratio(confusion[c][c], support[c])).collect();
    let f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect();
    Ok(MetricsReport {
        samples: n,
        f1_macro: f1.iter().sum::<f64>() / k as f64,
        top1: ratio(top1, n),
        top3: ratio(top3, n),
        zero_support: (0..k).filter(|&c| support[c] == 0).collect(),
        imbalance_ratio: imbalance_ratio(labels, k),
        precision,
        recall,
        f1,
        support,
        confusion,
    })
}
