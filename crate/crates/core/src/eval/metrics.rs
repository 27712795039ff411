use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Threshold metrics plus AUC for one level (patient or slice).
///
/// Rates whose denominator is zero are `None` rather than 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub(crate) fn check_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Positive when `probability >= threshold`.
pub fn compute_metrics(probabilities: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    check_labels(probabilities, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in probabilities.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fn_);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    let both = tp + fn_ > 0 && tn + fp > 0;
    Ok(MetricsReport {
        count: labels.len(),
        threshold,
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, labels.len()),
        precision,
        sensitivity,
        specificity: ratio(tn, tn + fp),
        f1,
        auc: if both { Some(super::roc_auc(probabilities, labels)?.auc) } else { None },
    })
}

impl MetricsReport {
    pub fn to_text(&self, title: &str) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        format!(
            "{title} (n = {}, threshold {})\n  accuracy     {}\n  precision    {}\n  sensitivity  {}\n  specificity  {}\n  f1           {}\n  auc          {}\n  TP {}  FP {}  TN {}  FN {}\n",
            self.count,
            self.threshold,
            f(self.accuracy),
            f(self.precision),
            f(self.sensitivity),
            f(self.specificity),
            f(self.f1),
            f(self.auc),
            self.tp,
            self.fp,
            self.tn,
            self.fn_
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion_matrix() {
        // TP=3 FP=1 TN=4 FN=2
        let p = [0.9, 0.8, 0.7, 0.6, 0.1, 0.2, 0.3, 0.4, 0.2, 0.1];
        let y = [1, 1, 1, 0, 0, 0, 0, 0, 1, 1];
        let m = compute_metrics(&p, &y, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (3, 1, 4, 2));
        assert_eq!(m.accuracy, Some(0.7));
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.sensitivity, Some(0.6));
        assert_eq!(m.specificity, Some(0.8));
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let m = compute_metrics(&[0.9, 0.1, 0.7], &[1, 0, 1], 0.5).unwrap();
        for v in [m.accuracy, m.precision, m.sensitivity, m.specificity, m.f1, m.auc] {
            assert_eq!(v, Some(1.0));
        }
    }

    #[test]
    fn all_negative_flags_sensitivity() {
        let m = compute_metrics(&[0.2, 0.7], &[0, 0], 0.5).unwrap();
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.auc, None);
        assert_eq!(m.specificity, Some(0.5));
        assert!(m.to_text("x").contains("undefined"));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_metrics(&[0.2], &[0, 1], 0.5).is_err());
        assert!(compute_metrics(&[0.2], &[2], 0.5).is_err());
    }
}
