//! Support-weighted accuracy / F1, per-class scores and the confusion matrix.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// `None` when the class was never predicted.
    pub precision: Option<f64>,
    /// `None` when the class never occurs in the labels.
    pub recall: Option<f64>,
    /// `None` when the class never occurs in the labels.
    pub f1: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub wa_acc: f64,
    pub wa_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

/// Accumulates predictions across batches.
#[derive(Clone, Debug)]
pub struct Evaluator {
    confusion: Vec<Vec<usize>>,
}

impl Evaluator {
    pub fn new(n_classes: usize) -> Self {
        Evaluator {
            confusion: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn push(&mut self, preds: &[usize], labels: &[usize]) {
        for (&p, &y) in preds.iter().zip(labels) {
            self.confusion[y][p] += 1;
        }
    }

    pub fn finish(&self) -> EvalMetrics {
        from_confusion(self.confusion.clone())
    }
}

pub fn evaluate(preds: &[usize], labels: &[usize], n_classes: usize) -> EvalMetrics {
    let mut e = Evaluator::new(n_classes);
    e.push(preds, labels);
    e.finish()
}

fn from_confusion(confusion: Vec<Vec<usize>>) -> EvalMetrics {
    let c = confusion.len();
    let n: usize = confusion.iter().flatten().sum();
    let mut per_class = Vec::with_capacity(c);
    let (mut correct, mut f1_sum) = (0usize, 0.0);
    for k in 0..c {
        let tp = confusion[k][k];
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[k]).sum();
        let precision = (predicted > 0).then(|| tp as f64 / predicted as f64);
        let recall = (support > 0).then(|| tp as f64 / support as f64);
        let f1 = recall.map(|r| {
            let p = precision.unwrap_or(0.0);
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        });
        correct += tp;
        f1_sum += support as f64 * f1.unwrap_or(0.0);
        per_class.push(ClassMetrics {
            class: k,
            precision,
            recall,
            f1,
            support,
        });
    }
    let denom = n.max(1) as f64;
    EvalMetrics {
        wa_acc: correct as f64 / denom,
        wa_f1: f1_sum / denom,
        per_class,
        confusion,
        n,
    }
}
