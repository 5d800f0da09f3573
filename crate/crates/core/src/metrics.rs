//! Classification metrics over the three polarity classes: confusion matrix,
//! accuracy, and per-class precision/recall/F1 with the macro average.

use crate::data::{Polarity, POLARITIES};

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Row: gold class index. Column: predicted class index.
    pub confusion: [[usize; 3]; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_pairs<I: IntoIterator<Item = (Polarity, Polarity)>>(pairs: I) -> Metrics {
        let mut confusion = [[0usize; 3]; 3];
        for (gold, pred) in pairs {
            confusion[gold.index()][pred.index()] += 1;
        }
        Metrics { confusion }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: usize = (0..3).map(|i| self.confusion[i][i]).sum();
        correct as f64 / total as f64
    }

    pub fn class_scores(&self, class: usize) -> ClassScores {
        let tp = self.confusion[class][class];
        let predicted: usize = (0..3).map(|g| self.confusion[g][class]).sum();
        let actual: usize = self.confusion[class].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores { precision, recall, f1 }
    }

    pub fn macro_f1(&self) -> f64 {
        (0..3).map(|c| self.class_scores(c).f1).sum::<f64>() / 3.0
    }

    pub fn format_report(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "accuracy {:.6}  macro_f1 {:.6}  records {}\n",
            self.accuracy(),
            self.macro_f1(),
            self.total()
        ));
        s.push_str("class      precision  recall     f1\n");
        for (c, pol) in POLARITIES.iter().enumerate() {
            let cs = self.class_scores(c);
            s.push_str(&format!(
                "{:<10} {:<10.6} {:<10.6} {:<10.6}\n",
                pol.as_str(),
                cs.precision,
                cs.recall,
                cs.f1
            ));
        }
        s.push_str("confusion rows=gold cols=predicted\n");
        for row in &self.confusion {
            s.push_str(&format!("{:>6} {:>6} {:>6}\n", row[0], row[1], row[2]));
        }
        s
    }
}
