//! Classification metrics. The positive class is "intoxicated" (label 1)
//! throughout: confusion counts, precision and recall all follow that
//! convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    pub fn count(&mut self, label: usize, predicted: usize) {
        match (label, predicted) {
            (1, 1) => self.true_pos += 1,
            (0, 0) => self.true_neg += 1,
            (0, 1) => self.false_pos += 1,
            (1, 0) => self.false_neg += 1,
            _ => unreachable!("labels are binary"),
        }
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }

    /// (value, defined); an empty denominator reports 0 with a flag.
    pub fn precision(&self) -> (f64, bool) {
        let denom = self.true_pos + self.false_pos;
        if denom == 0 {
            (0.0, false)
        } else {
            (self.true_pos as f64 / denom as f64, true)
        }
    }

    pub fn recall(&self) -> (f64, bool) {
        let denom = self.true_pos + self.false_neg;
        if denom == 0 {
            (0.0, false)
        } else {
            (self.true_pos as f64 / denom as f64, true)
        }
    }
}

/// One evaluated sample.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub subject_id: String,
    pub label: usize,
    pub predicted: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ZeroDivisionFlags {
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

/// Per-epoch training curve point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: ConfusionMatrix,
    pub zero_division: ZeroDivisionFlags,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_alpha: Option<f64>,
    pub predictions: Vec<PredictionRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<EpochStats>,
}

impl MetricsReport {
    /// Builds the report from per-sample predictions; metrics come from
    /// the confusion counts by the defining formulas.
    pub fn from_predictions(predictions: Vec<PredictionRecord>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Contract("no predictions to evaluate".into()));
        }
        let mut confusion = ConfusionMatrix::default();
        for p in &predictions {
            if p.label > 1 || p.predicted > 1 {
                return Err(Error::Contract(format!(
                    "non-binary label/prediction on sample {}",
                    p.sample_id
                )));
            }
            confusion.count(p.label, p.predicted);
        }
        let alphas: Vec<f64> = predictions.iter().filter_map(|p| p.alpha).collect();
        let mean_alpha = if alphas.is_empty() {
            None
        } else {
            Some(alphas.iter().sum::<f64>() / alphas.len() as f64)
        };
        let (precision, p_def) = confusion.precision();
        let (recall, r_def) = confusion.recall();
        Ok(MetricsReport {
            accuracy: confusion.accuracy(),
            precision,
            recall,
            confusion,
            zero_division: ZeroDivisionFlags {
                precision_undefined: !p_def,
                recall_undefined: !r_def,
            },
            mean_alpha,
            predictions,
            history: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: usize, label: usize, predicted: usize) -> PredictionRecord {
        PredictionRecord {
            sample_id: format!("s{id}"),
            subject_id: format!("subj{}", id / 4),
            label,
            predicted,
            alpha: None,
        }
    }

    #[test]
    fn worked_example_from_counts() {
        // TP=97, TN=95, FP=3, FN=5 -> accuracy 0.96, precision 0.97,
        // recall 97/102
        let mut preds = Vec::new();
        let mut id = 0;
        for _ in 0..97 {
            preds.push(pred(id, 1, 1));
            id += 1;
        }
        for _ in 0..95 {
            preds.push(pred(id, 0, 0));
            id += 1;
        }
        for _ in 0..3 {
            preds.push(pred(id, 0, 1));
            id += 1;
        }
        for _ in 0..5 {
            preds.push(pred(id, 1, 0));
            id += 1;
        }
        let r = MetricsReport::from_predictions(preds).unwrap();
        assert!((r.accuracy - 0.96).abs() < 1e-10);
        assert!((r.precision - 0.97).abs() < 1e-10);
        assert!((r.recall - 97.0 / 102.0).abs() < 1e-10);
        assert!((r.recall - 0.95098).abs() < 1e-5);
        assert_eq!(r.confusion.total(), 200);
    }

    #[test]
    fn all_correct_gives_unit_metrics() {
        let preds: Vec<_> = (0..10)
            .map(|i| pred(i, i % 2, i % 2))
            .collect();
        let r = MetricsReport::from_predictions(preds).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert!(!r.zero_division.precision_undefined);
    }

    #[test]
    fn metrics_match_brute_force_recount() {
        // independent recomputation straight from the prediction list
        let preds: Vec<_> = (0..50)
            .map(|i| pred(i, (i * 7) % 2, (i * 3) % 2))
            .collect();
        let r = MetricsReport::from_predictions(preds.clone()).unwrap();
        let correct = preds.iter().filter(|p| p.label == p.predicted).count();
        assert_eq!(r.accuracy, correct as f64 / preds.len() as f64);
        let tp = preds.iter().filter(|p| p.label == 1 && p.predicted == 1).count();
        let fp = preds.iter().filter(|p| p.label == 0 && p.predicted == 1).count();
        let fn_ = preds.iter().filter(|p| p.label == 1 && p.predicted == 0).count();
        assert_eq!(r.precision, tp as f64 / (tp + fp) as f64);
        assert_eq!(r.recall, tp as f64 / (tp + fn_) as f64);
        // integer identity: accuracy * total == TP + TN
        assert_eq!(
            (r.confusion.true_pos + r.confusion.true_neg) as f64,
            r.accuracy * r.confusion.total() as f64
        );
    }

    #[test]
    fn zero_denominator_reports_zero_with_flag() {
        // nothing predicted positive and no positive labels
        let preds: Vec<_> = (0..4).map(|i| pred(i, 0, 0)).collect();
        let r = MetricsReport::from_predictions(preds).unwrap();
        assert_eq!(r.precision, 0.0);
        assert!(r.zero_division.precision_undefined);
        assert!(r.zero_division.recall_undefined);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn mean_alpha_aggregates_present_values() {
        let mut preds = vec![pred(0, 0, 0), pred(1, 1, 1)];
        preds[0].alpha = Some(0.4);
        preds[1].alpha = Some(0.5);
        let r = MetricsReport::from_predictions(preds).unwrap();
        assert!((r.mean_alpha.unwrap() - 0.45).abs() < 1e-15);
    }
}

#[cfg(test)]
mod argmax_tests {
    /// Predicted class is argmax of the logits; adding a constant to both
    /// logits cannot change it.
    #[test]
    fn argmax_invariant_under_constant_logit_shift() {
        let argmax2 = |l: &[f64]| usize::from(l[1] > l[0]);
        for (a, b) in [(0.3, -0.2), (-5.0, 4.0), (1.0, 1.5), (0.0, 0.0)] {
            for c in [-100.0, -0.5, 0.0, 3.3, 1e6] {
                assert_eq!(argmax2(&[a, b]), argmax2(&[a + c, b + c]));
            }
        }
    }
}
