//! Classification metrics and attention diagnostics.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::objectives::attention_entropy;

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) share ranks i+1..=j.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney U statistic.
pub fn auroc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "auroc_binary",
            left: (1, scores.len()),
            right: (1, labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative samples".into(),
        ));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUROC per class from an `M × C` probability table.
/// Returns `(macro, per_class)`.
pub fn macro_auroc(probs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let n_classes = probs.first().map_or(0, Vec::len);
    if probs.len() != labels.len() || probs.iter().any(|r| r.len() != n_classes) {
        return Err(Error::Dimension {
            op: "macro_auroc",
            left: (probs.len(), n_classes),
            right: (labels.len(), 1),
        });
    }
    if n_classes == 0 {
        return Err(Error::UndefinedMetric("no classes".into()));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let auc = auroc_binary(&scores, &is_c).map_err(|_| {
            Error::UndefinedMetric(format!(
                "class {c} is absent (or is the only class) in the labels"
            ))
        })?;
        per_class.push(auc);
    }
    let mean = per_class.iter().sum::<f64>() / n_classes as f64;
    Ok((mean, per_class))
}

/// Unweighted mean of per-class F1 over `n_classes` classes; a class with no
/// true or predicted members contributes 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "macro_f1",
            left: (1, pred.len()),
            right: (1, truth.len()),
        });
    }
    if pred.is_empty() || n_classes == 0 {
        return Err(Error::UndefinedMetric("macro-F1 of an empty set".into()));
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|(&p, &t)| p != c && t == c).count() as f64;
        // 2PR/(P+R) simplifies to 2TP/(2TP+FP+FN).
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    Ok(total / n_classes as f64)
}

/// Mean over bags of the cumulative sum of the `k` largest attention weights.
/// Bags shorter than `k` are padded with their final cumulative value.
pub fn cumulative_topk_mass(maps: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    if maps.is_empty() {
        return Err(Error::Domain("no attention maps".into()));
    }
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let mut acc = vec![0.0; k];
    for a in maps {
        let mut sorted = a.clone();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap_or(Ordering::Equal));
        let mut running = 0.0;
        for (i, slot) in acc.iter_mut().enumerate() {
            if let Some(v) = sorted.get(i) {
                running += v;
            }
            *slot += running;
        }
    }
    let m = maps.len() as f64;
    acc.iter_mut().for_each(|v| *v /= m);
    Ok(acc)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            op: "pearson",
            left: (1, x.len()),
            right: (1, y.len()),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 3 {
        return Err(Error::UndefinedMetric(format!(
            "Spearman needs at least 3 pairs, got {}",
            x.len()
        )));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub macro_auc: f64,
    pub macro_f1: f64,
    pub per_class_auc: Vec<f64>,
    /// Nats.
    pub mean_attention_entropy: f64,
    /// Mean of `H(A) / ln N`; single-instance bags count as 1.
    pub mean_normalized_entropy: f64,
}

/// `(mean H, mean H/ln N)` over a set of attention maps.
pub fn entropy_summary(maps: &[Vec<f64>]) -> Result<(f64, f64)> {
    if maps.is_empty() {
        return Err(Error::Domain("no attention maps".into()));
    }
    let (mut raw, mut norm) = (0.0, 0.0);
    for a in maps {
        let h = attention_entropy(a)?;
        raw += h;
        norm += if a.len() > 1 { h / (a.len() as f64).ln() } else { 1.0 };
    }
    let m = maps.len() as f64;
    Ok((raw / m, norm / m))
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl EvalReport {
    pub fn compute(probs: &[Vec<f64>], labels: &[usize], maps: &[Vec<f64>]) -> Result<Self> {
        let n_classes = probs.first().map_or(0, Vec::len);
        let (macro_auc, per_class_auc) = macro_auroc(probs, labels)?;
        let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let macro_f1 = macro_f1(&preds, labels, n_classes)?;
        let (mean_attention_entropy, mean_normalized_entropy) = entropy_summary(maps)?;
        Ok(Self {
            macro_auc,
            macro_f1,
            per_class_auc,
            mean_attention_entropy,
            mean_normalized_entropy,
        })
    }
}
