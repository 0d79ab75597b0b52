use std::cmp::Ordering;

use crate::error::{Error, Result};

fn undefined(msg: &str) -> Error {
    Error::UndefinedMetric(msg.into())
}

fn check_len(labels: &[bool], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(undefined("labels and scores differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(undefined("NaN score"));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, from midranks.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_len(labels, scores)?;
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(undefined("AUROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Indices by descending score, ties by ascending index.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Average precision: mean of precision at the rank of each positive.
pub fn aucpr(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_len(labels, scores)?;
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 {
        return Err(undefined("AUCPR needs a positive"));
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in descending(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// ROC points `(fpr, tpr)` from the top threshold down, one per distinct score.
pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_len(labels, scores)?;
    let p = labels.iter().filter(|l| **l).count() as f64;
    let n = labels.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return Err(undefined("ROC needs both classes"));
    }
    let order = descending(scores);
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            out.push((fp / n, tp / p));
        }
    }
    Ok(out)
}

/// Precision-recall points `(recall, precision)`, one per distinct score.
pub fn pr_curve(labels: &[bool], scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_len(labels, scores)?;
    let p = labels.iter().filter(|l| **l).count() as f64;
    if p == 0.0 {
        return Err(undefined("PR curve needs a positive"));
    }
    let order = descending(scores);
    let mut out = Vec::new();
    let mut tp = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1.0;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            out.push((tp / p, tp / (k + 1) as f64));
        }
    }
    Ok(out)
}

/// Candidates sorted by descending score, ties by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedCandidates {
    pub ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl RankedCandidates {
    pub fn new(mut items: Vec<(u64, f64, bool)>) -> Self {
        items.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        Self {
            ids: items.iter().map(|c| c.0).collect(),
            scores: items.iter().map(|c| c.1).collect(),
            labels: items.iter().map(|c| c.2).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }
}

/// Fraction of the top `k` that are positive.
pub fn hit_rate_at_k(r: &RankedCandidates, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(undefined("k must be positive"));
    }
    if k > r.len() {
        return Err(undefined("k exceeds candidate count"));
    }
    Ok(r.labels[..k].iter().filter(|l| **l).count() as f64 / k as f64)
}

/// Mean reciprocal rank over all positives.
pub fn mrr(r: &RankedCandidates) -> Result<f64> {
    let n = r.n_positive();
    if n == 0 {
        return Err(undefined("MRR needs a positive"));
    }
    let sum: f64 = r
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l)
        .map(|(i, _)| 1.0 / (i + 1) as f64)
        .sum();
    Ok(sum / n as f64)
}

fn predicted_counts(r: &RankedCandidates, alpha: f64) -> (usize, usize, usize) {
    let mut both = 0;
    let mut pred = 0;
    for (s, l) in r.scores.iter().zip(&r.labels) {
        if *s >= alpha {
            pred += 1;
            if *l {
                both += 1;
            }
        }
    }
    (both, pred, r.n_positive())
}

/// Jaccard similarity of the positives and the candidates scoring `≥ α`;
/// 1 when both are empty.
pub fn jaccard_at_alpha(r: &RankedCandidates, alpha: f64) -> f64 {
    let (both, pred, truth) = predicted_counts(r, alpha);
    let union = pred + truth - both;
    if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    }
}

/// F1 of the thresholded prediction; 1 when both sets are empty.
pub fn f1_at_alpha(r: &RankedCandidates, alpha: f64) -> f64 {
    let (both, pred, truth) = predicted_counts(r, alpha);
    if pred + truth == 0 {
        1.0
    } else {
        2.0 * both as f64 / (pred + truth) as f64
    }
}

pub const ALPHA_GRID: usize = 50;

/// The threshold among 50 evenly spaced values in `[0, 1]` with the best
/// mean F1; the smallest wins ties.
pub fn select_alpha_best(rankings: &[RankedCandidates]) -> f64 {
    let mut best = (0.0, f64::NEG_INFINITY);
    for i in 0..ALPHA_GRID {
        let alpha = i as f64 / (ALPHA_GRID - 1) as f64;
        let f1 = rankings.iter().map(|r| f1_at_alpha(r, alpha)).sum::<f64>()
            / rankings.len().max(1) as f64;
        if f1 > best.1 {
            best = (alpha, f1);
        }
    }
    best.0
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
