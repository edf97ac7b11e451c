//! Thresholded binary classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Ratio with the `0 / 0 = 0` convention. The flag reports whether the
/// convention was used.
fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_).0
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp).0
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Invalid("accuracy of an empty evaluation".into()));
        }
        Ok((self.tp + self.tn) as f64 / self.total() as f64)
    }

    pub fn add(&mut self, predicted: bool, label: u8) {
        match (predicted, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::out_of_range("threshold", threshold, "[0, 1]"))
    }
}

/// Tallies predictions (`score >= threshold` is positive) against labels.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: alloc::vec![scores.len()],
            rhs: alloc::vec![labels.len()],
        });
    }
    check_threshold(threshold)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        c.add(s >= threshold, l);
    }
    Ok(c)
}

/// `(1 + b^2) P R / (b^2 P + R)`, or 0 when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub recall: f64,
    pub precision: f64,
    pub f_beta: f64,
    pub accuracy: f64,
    pub beta: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    /// Set when a 0/0 ratio was replaced by 0.
    pub degenerate: bool,
}

impl MetricRow {
    pub fn from_counts(counts: ConfusionCounts, threshold: f64, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::out_of_range("beta", beta, "> 0"));
        }
        check_threshold(threshold)?;
        let (recall, d1) = ratio(counts.tp, counts.tp + counts.fn_);
        let (precision, d2) = ratio(counts.tp, counts.tp + counts.fp);
        let f = f_beta(precision, recall, beta);
        Ok(Self {
            recall,
            precision,
            f_beta: f,
            accuracy: counts.accuracy()?,
            beta,
            threshold,
            counts,
            degenerate: d1 || d2 || (precision == 0.0 && recall == 0.0),
        })
    }

    pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64, beta: f64) -> Result<Self> {
        Self::from_counts(confusion(scores, labels, threshold)?, threshold, beta)
    }
}
