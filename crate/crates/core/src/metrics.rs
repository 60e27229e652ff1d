//! Minority-class classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub pr_auc: f64,
}

fn check(len: usize, labels: &[u8]) -> Result<()> {
    if len != labels.len() {
        return Err(Error::Shape(format!("{len} scores for {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Precondition("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Precision, recall and F1 of the positive class. Undefined ratios are 0.
pub fn precision_recall_f1(predicted: &[bool], labels: &[u8]) -> Result<(f64, f64, f64)> {
    check(predicted.len(), labels)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &l) in predicted.iter().zip(labels) {
        match (p, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

/// Area under the precision-recall curve by the trapezoidal rule, walking
/// thresholds from the highest score down and starting at (recall 0,
/// precision 1). Tied scores enter together. Zero when there are no positives.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores.len(), labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let r = tp as f64 / positives as f64;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    Ok(area)
}

/// Metrics of probability scores, predicting positive above `threshold`.
pub fn evaluate_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    let predicted: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    let (precision, recall, f1) = precision_recall_f1(&predicted, labels)?;
    Ok(Metrics {
        f1,
        precision,
        recall,
        pr_auc: pr_auc(scores, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_negative_predictions() {
        let m = evaluate_scores(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.recall, 0.0);
    }

    #[test]
    fn perfect_predictions() {
        let m = evaluate_scores(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!((m.f1, m.precision, m.recall, m.pr_auc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn half_and_half() {
        // tp 1, fp 1, fn 1.
        let (p, r, f1) = precision_recall_f1(&[true, true, false, false], &[1, 0, 1, 0]).unwrap();
        assert_eq!((p, r, f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn pr_auc_hand_computed() {
        // Ranking: + - + : points (0.5, 1), (0.5, 0.5), (1, 2/3).
        let a = pr_auc(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        let expect = 0.5 * 1.0 + 0.0 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0;
        assert!((a - expect).abs() < 1e-12);
        assert_eq!(pr_auc(&[0.3, 0.2], &[0, 0]).unwrap(), 0.0);
    }
}
