use serde::{Deserialize, Serialize};

use super::metrics::check_labels;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    /// `(false positive rate, true positive rate)`, from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
}

/// ROC curve over all distinct thresholds. Tied scores form one step, so a
/// tied positive/negative pair contributes 1/2 to the area.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_labels(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Trapezoids in integer units: each step adds neg_step * (2 tp_before + pos_step).
    let mut twice_area: u128 = 0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dp, mut dn) = (0, 0);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                dp += 1;
            } else {
                dn += 1;
            }
            i += 1;
        }
        twice_area += dn as u128 * (2 * tp + dp) as u128;
        tp += dp;
        fp += dn;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        auc: twice_area as f64 / (2 * pos * neg) as f64,
        points,
    })
}

impl RocCurve {
    /// Two whitespace-separated columns, `fpr tpr`, one point per line.
    pub fn to_text(&self) -> String {
        self.points.iter().map(|(f, t)| format!("{f:.6} {t:.6}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let r = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn separated_and_constant() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap().auc, 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn monotone_transform_invariance() {
        let s = [0.3, -1.0, 2.5, 0.3, 0.0, 1.1, -0.2];
        let y = [1, 0, 1, 0, 0, 1, 1];
        let a = roc_auc(&s, &y).unwrap().auc;
        let t: Vec<f64> = s.iter().map(|v: &f64| (3.0 * v).exp() + 7.0).collect();
        assert_eq!(roc_auc(&t, &y).unwrap().auc, a);
    }
}
