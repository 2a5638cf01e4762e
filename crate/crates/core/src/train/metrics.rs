//! Threshold-free and thresholded binary classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    Ok(())
}

/// Area under the ROC curve as the tie-corrected rank statistic
/// `P(s+ > s-) + P(s+ = s-) / 2`, computed from average ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC-AUC needs both classes"));
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
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC operating points `(fpr, tpr, threshold)` for every distinct score,
/// from the strictest threshold down, starting at `(0, 0, +inf)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::invalid("ROC curve needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (n, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if n + 1 == order.len() || scores[order[n + 1]] != scores[k] {
            out.push((fp / neg, tp / pos, scores[k]));
        }
    }
    Ok(out)
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(tp: u64, fp: u64, tn: u64, fn_: u64) -> f64 {
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    ((tp * tn - fp * fn_) / denom.sqrt()).clamp(-1.0, 1.0)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub accuracy: f64,
    /// 0 when there are no positives.
    pub sensitivity: f64,
    /// 0 when there are no negatives.
    pub specificity: f64,
    /// Absent for single-class label sets.
    pub roc_auc: Option<f64>,
    pub mcc: f64,
    /// An exam is called positive when its score is at least this.
    pub threshold: f64,
}

impl MetricsReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check(scores, labels)?;
        if scores.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty set"));
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (s, l) in scores.iter().zip(labels) {
            match (*s >= threshold, *l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        Ok(MetricsReport {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            roc_auc: roc_auc(scores, labels).ok(),
            mcc: mcc(tp, fp, tn, fn_),
            threshold,
        })
    }

    /// Field-wise mean of several reports (counts are summed).
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let n = reports.len() as f64;
        let first = reports.first()?;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let aucs: Option<Vec<f64>> = reports.iter().map(|r| r.roc_auc).collect();
        Some(MetricsReport {
            tp: reports.iter().map(|r| r.tp).sum(),
            fp: reports.iter().map(|r| r.fp).sum(),
            tn: reports.iter().map(|r| r.tn).sum(),
            fn_: reports.iter().map(|r| r.fn_).sum(),
            accuracy: avg(|r| r.accuracy),
            sensitivity: avg(|r| r.sensitivity),
            specificity: avg(|r| r.specificity),
            roc_auc: aucs.map(|a| a.iter().sum::<f64>() / n),
            mcc: avg(|r| r.mcc),
            threshold: first.threshold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(roc_auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn curve_ends_at_one_one_and_integrates_to_auc() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.7, 0.2];
        let labels = [0, 0, 1, 1, 1, 0, 1];
        let curve = roc_curve(&scores, &labels).unwrap();
        assert_eq!(curve.first().unwrap().0, 0.0);
        assert_eq!(*curve.last().unwrap(), (1.0, 1.0, 0.1));
        let area: f64 = curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        assert!((area - roc_auc(&scores, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mcc_cases() {
        assert_eq!(mcc(5, 0, 5, 0), 1.0);
        assert_eq!(mcc(1, 1, 1, 1), 0.0);
        assert_eq!(mcc(0, 0, 7, 3), 0.0);
        let want = (50.0 * 40.0 - 10.0 * 5.0) / ((60.0f64) * 55.0 * 50.0 * 45.0).sqrt();
        assert!((mcc(50, 10, 40, 5) - want).abs() < 1e-15);
    }

    #[test]
    fn hand_built_report() {
        // threshold 0.5: predictions 1 1 0 1 0 0 1 0
        let scores = [0.9, 0.6, 0.4, 0.5, 0.1, 0.3, 0.7, 0.2];
        let labels = [1, 1, 1, 0, 0, 0, 0, 0];
        let r = MetricsReport::from_scores(&scores, &labels, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (2, 2, 3, 1));
        assert_eq!(r.accuracy, 5.0 / 8.0);
        assert_eq!(r.sensitivity, 2.0 / 3.0);
        assert_eq!(r.specificity, 3.0 / 5.0);
        // positives beat negatives in 5 + 4 + 3 of 15 pairs
        assert!((r.roc_auc.unwrap() - 12.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_boundaries() {
        let scores = [0.0, 0.2, 0.99, 0.5, 0.7];
        let labels = [1, 0, 1, 0, 1];
        assert_eq!(MetricsReport::from_scores(&scores, &labels, 0.0).unwrap().sensitivity, 1.0);
        assert_eq!(MetricsReport::from_scores(&scores, &labels, 1.0).unwrap().specificity, 1.0);
        assert!(MetricsReport::from_scores(&[], &[], 0.5).is_err());
    }

    #[test]
    fn mean_of_reports() {
        let a = MetricsReport::from_scores(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        let b = MetricsReport::from_scores(&[0.1, 0.9], &[1, 0], 0.5).unwrap();
        let m = MetricsReport::mean(&[a, b]).unwrap();
        assert_eq!(m.roc_auc, Some(0.5));
        assert_eq!(m.accuracy, 0.5);
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (1, 1, 1, 1));
        assert!(MetricsReport::mean(&[]).is_none());
    }
}
