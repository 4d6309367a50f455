//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    Auc,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "auc" => Ok(Metric::Auc),
            _ => Err(Error::contract(format!("unknown metric {s:?}"))),
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows whose argmax equals the label.
pub fn correct_count(scores: &[Vec<f64>], labels: &[usize]) -> usize {
    scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| argmax(s) == l)
        .count()
}

pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_nonempty(scores, labels)?;
    Ok(correct_count(scores, labels) as f64 / labels.len() as f64)
}

fn check_nonempty(scores: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::contract("metric over an empty dataset"));
    }
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mann-Whitney AUC from midranks: the probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if scores.len() != positive.len() || n_pos == 0 || n_neg == 0 {
        return Err(Error::contract(
            "AUC needs matching lengths and both classes present",
        ));
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
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUC averaged over the classes that have both positives and
/// negatives in `labels`.
pub fn ovr_auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_nonempty(scores, labels)?;
    let classes = scores[0].len();
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if positive.iter().all(|&p| p) || !positive.iter().any(|&p| p) {
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        total += binary_auc(&col, &positive)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::contract("AUC needs at least two classes present"));
    }
    Ok(total / used as f64)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn score(metric: Metric, logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    match metric {
        Metric::Accuracy => accuracy(logits, labels),
        Metric::Auc => ovr_auc(&softmax_rows(logits), labels),
    }
}
