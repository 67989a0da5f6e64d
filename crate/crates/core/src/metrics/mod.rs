//! Frame-level ranking metrics and the evaluation driver.

mod eval;

pub use eval::{evaluate, write_outputs, EvalOptions, Evaluation, VideoTrace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics over concatenated frame scores of a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    /// Metrics over abnormal-labeled videos only.
    pub auc_sub: f64,
    pub ap_sub: f64,
    /// AUC of the unweighted classifier scores, for comparison.
    pub auc_original: f64,
    pub n_videos: usize,
    pub n_frames: usize,
    pub n_positive: usize,
    /// `(fpr, tpr)` by decreasing threshold.
    pub roc_points: Vec<(f64, f64)>,
    /// `(recall, precision)` by decreasing threshold.
    pub pr_points: Vec<(f64, f64)>,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Usage(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score; ties keep their original order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("NaN scores are rejected")
    });
    idx
}

/// Runs of equal scores in `order`, as `(positives, negatives)` counts.
fn tie_groups(scores: &[f64], labels: &[u8], order: &[usize]) -> Vec<(usize, usize)> {
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for &i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        if labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Mann–Whitney estimate of `P(s+ > s-) + P(s+ = s-)/2`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC AUC needs both positive and negative frames".into(),
        ));
    }
    let order = descending(scores);
    // Walking from the top, every positive beats the negatives still below it.
    let mut neg_above = 0usize;
    let mut wins = 0.0f64;
    for (p, n) in tie_groups(scores, labels, &order) {
        let below = neg - neg_above - n;
        wins += p as f64 * (below as f64 + 0.5 * n as f64);
        neg_above += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision: mean precision at the rank of each positive,
/// with ties ordered by index.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs a positive frame".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in descending(scores).iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// ROC points from `(0, 0)` to `(1, 1)`, one per distinct threshold.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC curve needs both classes".into(),
        ));
    }
    let order = descending(scores);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0, 0);
    for (p, n) in tie_groups(scores, labels, &order) {
        tp += p;
        fp += n;
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Precision-recall points, one per distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "PR curve needs a positive frame".into(),
        ));
    }
    let order = descending(scores);
    let mut pts = Vec::new();
    let (mut tp, mut seen) = (0, 0);
    for (p, n) in tie_groups(scores, labels, &order) {
        tp += p;
        seen += p + n;
        pts.push((tp as f64 / pos as f64, tp as f64 / seen as f64));
    }
    Ok(pts)
}

#[cfg(test)]
mod tests;
