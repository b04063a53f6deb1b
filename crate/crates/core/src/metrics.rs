//! Accuracy, macro-averaged precision/recall/F1 and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of gold instances.
    pub support: usize,
    /// Number of predicted instances.
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Only classes that occur in the gold labels or the predictions.
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

impl ClassificationReport {
    /// Classes seen in neither gold nor predictions are left out of the macro
    /// averages; a metric whose denominator is zero counts as 0.
    pub fn compute(gold: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        if gold.len() != predicted.len() {
            return Err(Error::Config(format!(
                "{} gold labels but {} predictions",
                gold.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&y, &p) in gold.iter().zip(predicted) {
            for label in [y, p] {
                if label >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        label,
                        num_labels: num_classes,
                    });
                }
            }
            confusion[y][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };

        let mut per_class = Vec::new();
        for k in 0..num_classes {
            let support: usize = confusion[k].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[k]).sum();
            if support == 0 && predicted == 0 {
                continue;
            }
            let tp = confusion[k][k];
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class.push(ClassMetrics {
                class: k,
                precision,
                recall,
                f1,
                support,
                predicted,
            });
        }
        let n = per_class.len() as f64;
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
        Ok(ClassificationReport {
            accuracy: ratio(correct, gold.len()),
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            per_class,
            confusion,
            total: gold.len(),
        })
    }

    pub fn class(&self, k: usize) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.class == k)
    }

    pub fn trace(&self) -> usize {
        (0..self.confusion.len())
            .map(|k| self.confusion[k][k])
            .sum()
    }
}

/// Metrics for one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub satisfaction: Option<ClassificationReport>,
    pub dialogue_acts: Option<ClassificationReport>,
    pub num_dialogues: usize,
}

impl EvalReport {
    pub fn use_f1(&self) -> f64 {
        self.satisfaction.as_ref().map_or(0.0, |r| r.macro_f1)
    }

    pub fn dar_f1(&self) -> f64 {
        self.dialogue_acts.as_ref().map_or(0.0, |r| r.macro_f1)
    }

    /// Plain-text summary table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, report) in [("USE", &self.satisfaction), ("DAR", &self.dialogue_acts)] {
            if let Some(r) = report {
                out.push_str(&format!(
                    "{name}\tacc={:.4}\tP={:.4}\tR={:.4}\tF1={:.4}\tn={}\n",
                    r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1, r.total
                ));
                for c in &r.per_class {
                    out.push_str(&format!(
                        "{name}[{}]\tP={:.4}\tR={:.4}\tF1={:.4}\tsupport={}\n",
                        c.class, c.precision, c.recall, c.f1, c.support
                    ));
                }
            }
        }
        out
    }
}
