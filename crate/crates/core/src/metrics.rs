//! Confusion-matrix metrics: accuracy and macro-averaged F1.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Ratio with `0 / 0` defined as 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let m = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..m).map(|i| confusion[i][i]).sum();
        let mut precision = Vec::with_capacity(m);
        let mut recall = Vec::with_capacity(m);
        let mut f1 = Vec::with_capacity(m);
        for k in 0..m {
            let tp = confusion[k][k] as f64;
            let predicted: usize = confusion.iter().map(|row| row[k]).sum();
            let actual: usize = confusion[k].iter().sum();
            let p = ratio(tp, predicted as f64);
            let r = ratio(tp, actual as f64);
            precision.push(p);
            recall.push(r);
            f1.push(ratio(2.0 * p * r, p + r));
        }
        Self {
            accuracy: ratio(trace as f64, total as f64),
            macro_f1: if m == 0 {
                0.0
            } else {
                f1.iter().sum::<f64>() / m as f64
            },
            per_class_precision: precision,
            per_class_recall: recall,
            per_class_f1: f1,
            confusion,
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Self {
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

impl Metrics {
    /// Summary rows followed by per-class precision, recall and F1.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("metric,class,value\n");
        out.push_str(&format!("accuracy,,{}\n", self.accuracy));
        out.push_str(&format!("macro_f1,,{}\n", self.macro_f1));
        for (k, name) in class_names.iter().enumerate() {
            out.push_str(&format!(
                "precision,{name},{}\n",
                self.per_class_precision[k]
            ));
            out.push_str(&format!("recall,{name},{}\n", self.per_class_recall[k]));
            out.push_str(&format!("f1,{name},{}\n", self.per_class_f1[k]));
        }
        out
    }
}
