//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    /// Scores `predictions` against `truth` over `classes` classes. Macro
    /// averages run over the classes that occur in `truth`; a class that is
    /// never predicted has precision 0.
    pub fn from_predictions(predictions: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::invalid("evaluate", "empty split"));
        }
        if predictions.len() != truth.len() {
            return Err(Error::invalid(
                "evaluate",
                format!("{} predictions for {} labels", predictions.len(), truth.len()),
            ));
        }
        if let Some(&bad) = predictions.iter().chain(truth).find(|&&c| c >= classes) {
            return Err(Error::invalid("evaluate", format!("class {bad} outside [0, {classes})")));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &t) in predictions.iter().zip(truth) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut per_class = Vec::new();
        for c in 0..classes {
            let support: usize = confusion[c].iter().sum();
            if support == 0 {
                continue;
            }
            let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
            let tp = confusion[c][c];
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class.push(ClassMetrics {
                class: c,
                precision,
                recall,
                f1,
                support,
            });
        }
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
        Ok(Self {
            accuracy: ratio(correct, truth.len()),
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
            confusion,
        })
    }
}
