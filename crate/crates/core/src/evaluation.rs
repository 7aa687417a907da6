//! ROC analysis of instance confidences and heart-rate error statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Human-readable statement of how instance-level truth is assigned; it is
/// written next to every ROC output.
pub const FPR_DEFINITION: &str =
    "per-instance: an instance is a true heartbeat iff its peak lies within ±halo s of a ground-truth beat";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Instance truthing tolerance in seconds.
    pub halo: f64,
    pub rate_window: f64,
    pub rate_step: f64,
    /// Tolerance for matching confirmed beats to ground truth.
    pub match_tolerance: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            halo: 0.25,
            rate_window: 60.0,
            rate_step: 1.0,
            match_tolerance: 0.25,
        }
    }
}

/// `|t − nearest beat| ≤ halo` for each time.
pub fn label_instances(times: &[f64], gt_beats: &[f64], halo: f64) -> Vec<bool> {
    times
        .iter()
        .map(|&t| {
            let i = gt_beats.partition_point(|&b| b < t);
            let after = gt_beats.get(i).map(|b| b - t);
            let before = i.checked_sub(1).map(|j| t - gt_beats[j]);
            after
                .into_iter()
                .chain(before)
                .any(|dist| dist <= halo)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Starts at `(0, 0)` with an infinite threshold; thresholds descend.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Threshold sweep over the distinct scores (ties grouped), AUC by the
/// trapezoid rule.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "roc labels",
            index: 0,
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("ROC needs both positive and negative instances".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points.last().expect("curve starts with the origin");
        let (fpr, tpr) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        auc += (fpr - prev.fpr) * (tpr + prev.tpr) / 2.0;
        points.push(RocPoint {
            threshold: s,
            fpr,
            tpr,
        });
    }
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateErrorStats {
    pub mean_abs_error: f64,
    pub std_dev: f64,
    pub n_windows: usize,
}

/// Mean and (population) standard deviation of `|estimated − reference|`
/// over windows sharing the same time grid.
pub fn rate_error(estimated: &[(f64, f64)], reference: &[(f64, f64)]) -> Result<RateErrorStats> {
    if estimated.len() != reference.len() || estimated.is_empty() {
        return Err(Error::Data(format!(
            "rate grids differ: {} vs {} windows",
            estimated.len(),
            reference.len()
        )));
    }
    if let Some(i) = estimated
        .iter()
        .zip(reference)
        .position(|(a, b)| (a.0 - b.0).abs() > 1e-6)
    {
        return Err(Error::Data(format!("rate grids differ at window {i}")));
    }
    let errors: Vec<f64> = estimated
        .iter()
        .zip(reference)
        .map(|(a, b)| (a.1 - b.1).abs())
        .collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(RateErrorStats {
        mean_abs_error: mean,
        std_dev: var.sqrt(),
        n_windows: errors.len(),
    })
}

/// Beat-level matching summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatMatch {
    pub true_beats: usize,
    /// Ground-truth beats with a detection within tolerance.
    pub matched: usize,
    /// Detections not within tolerance of any ground-truth beat.
    pub false_detections: usize,
}

impl BeatMatch {
    pub fn sensitivity(&self) -> f64 {
        if self.true_beats == 0 {
            return 1.0;
        }
        self.matched as f64 / self.true_beats as f64
    }
}

/// One-to-one greedy matching of detections to beats (nearest pairs first).
pub fn match_beats(detections: &[f64], truth: &[f64], tolerance: f64) -> BeatMatch {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &d) in detections.iter().enumerate() {
        let lo = truth.partition_point(|&t| t < d - tolerance);
        for (j, &t) in truth.iter().enumerate().skip(lo) {
            if t > d + tolerance {
                break;
            }
            pairs.push(((d - t).abs(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; detections.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut matched = 0;
    for (_, i, j) in pairs {
        if !det_used[i] && !truth_used[j] {
            det_used[i] = true;
            truth_used[j] = true;
            matched += 1;
        }
    }
    BeatMatch {
        true_beats: truth.len(),
        matched,
        false_detections: detections.len() - matched,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halo_labels() {
        let gt = [1.0, 2.0, 5.0];
        let labels = label_instances(&[1.0, 3.0, 2.25, 4.74, 4.76, 10.0], &gt, 0.25);
        assert_eq!(labels, vec![true, false, true, false, true, false]);
        assert_eq!(label_instances(&[1.0], &[], 0.25), vec![false]);
    }

    #[test]
    fn perfect_and_inverted_separation() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(roc(&scores, &labels).unwrap().auc, 1.0);
        let inverted = [false, false, true, true];
        assert_eq!(roc(&scores, &inverted).unwrap().auc, 0.0);
    }

    #[test]
    fn ties_are_grouped() {
        let curve = roc(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]).unwrap();
        assert_eq!(curve.points.len(), 2);
        assert_eq!(curve.auc, 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(roc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn rate_error_cases() {
        let a = vec![(60.0, 70.0), (61.0, 72.0), (62.0, 71.0)];
        let s = rate_error(&a, &a).unwrap();
        assert_eq!((s.mean_abs_error, s.std_dev, s.n_windows), (0.0, 0.0, 3));
        let b: Vec<(f64, f64)> = a.iter().map(|&(t, r)| (t, r + 2.0)).collect();
        let s = rate_error(&b, &a).unwrap();
        assert_eq!((s.mean_abs_error, s.std_dev), (2.0, 0.0));
        assert!(rate_error(&a[..2], &a).is_err());
        let shifted: Vec<(f64, f64)> = a.iter().map(|&(t, r)| (t + 0.5, r)).collect();
        assert!(rate_error(&shifted, &a).is_err());
    }

    #[test]
    fn beat_matching_is_one_to_one() {
        let m = match_beats(&[1.0, 1.05, 3.0, 9.0], &[1.02, 3.1, 5.0], 0.25);
        assert_eq!(m.matched, 2);
        assert_eq!(m.false_detections, 2);
        assert!((m.sensitivity() - 2.0 / 3.0).abs() < 1e-15);
    }
}
