use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts, `counts[true][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    pub fn tally(predictions: &[usize], labels: &[usize]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Empty("no predictions to score".into()));
        }
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            if p > 1 || y > 1 {
                return Err(Error::invalid(format!("class pair ({y}, {p}) is not binary")));
            }
            c.counts[y][p] += 1;
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        (self.counts[0][0] + self.counts[1][1]) as f64 / self.total() as f64
    }

    /// Rows normalised to percent of each true class; an empty row stays zero.
    pub fn percent(&self) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (row, counts) in out.iter_mut().zip(&self.counts) {
            let n = counts[0] + counts[1];
            if n > 0 {
                for (o, &c) in row.iter_mut().zip(counts) {
                    *o = 100.0 * c as f64 / n as f64;
                }
            }
        }
        out
    }

    /// F1 with `class` as the positive class. Zero denominators give 0 and
    /// set the returned flag.
    pub fn f1(&self, class: usize) -> (f64, bool) {
        let other = 1 - class;
        let tp = self.counts[class][class] as f64;
        let fp = self.counts[other][class] as f64;
        let fn_ = self.counts[class][other] as f64;
        let mut undefined = false;
        let mut ratio = |num: f64, den: f64| {
            if den == 0.0 {
                undefined = true;
                0.0
            } else {
                num / den
            }
        };
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        // 2PR / (P + R) with the counts substituted
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        (f, undefined)
    }

    pub fn add(&mut self, other: &Confusion) {
        for i in 0..2 {
            for j in 0..2 {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub confusion: Confusion,
    pub confusion_percent: [[f64; 2]; 2],
    /// Per positive class.
    pub f1: [f64; 2],
    pub macro_f1: f64,
    /// Precision or recall had a zero denominator.
    pub f1_undefined: [bool; 2],
}

/// Confusion matrix in percent plus per-class and macro F1.
pub fn confusion_and_f1(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    Ok(metrics_from(Confusion::tally(predictions, labels)?))
}

pub fn metrics_from(confusion: Confusion) -> Metrics {
    let (f0, u0) = confusion.f1(0);
    let (f1, u1) = confusion.f1(1);
    Metrics {
        accuracy: confusion.accuracy(),
        confusion,
        confusion_percent: confusion.percent(),
        f1: [f0, f1],
        macro_f1: 0.5 * (f0 + f1),
        f1_undefined: [u0, u1],
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `"80.08% ± 5.70%"` from fractions.
pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    format!("{:.2}% \u{b1} {:.2}%", 100.0 * mean, 100.0 * sd)
}
