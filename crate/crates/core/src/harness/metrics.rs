//! Confusion matrices and balanced accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensornet::NUM_CLASSES;

/// Rows are true classes, columns predictions.
pub type Confusion = [[u64; NUM_CLASSES]; NUM_CLASSES];

pub fn confusion(truth: &[usize], predicted: &[usize]) -> Result<Confusion> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid("truth and predictions differ in length"));
    }
    let mut c = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= NUM_CLASSES || p >= NUM_CLASSES {
            return Err(Error::invalid(format!("class index out of range: {t} / {p}")));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    /// `None` for classes without true samples.
    pub recall: [Option<f64>; NUM_CLASSES],
    pub balanced_accuracy: f64,
}

/// Mean recall over classes with support.
pub fn balanced_accuracy(c: &Confusion) -> Result<f64> {
    Ok(metrics(c)?.balanced_accuracy)
}

pub fn metrics(c: &Confusion) -> Result<Metrics> {
    let mut recall = [None; NUM_CLASSES];
    let (mut sum, mut k) = (0.0, 0);
    for (i, row) in c.iter().enumerate() {
        let support: u64 = row.iter().sum();
        if support > 0 {
            let r = row[i] as f64 / support as f64;
            recall[i] = Some(r);
            sum += r;
            k += 1;
        }
    }
    if k == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    Ok(Metrics { confusion: *c, recall, balanced_accuracy: sum / k as f64 })
}

/// Index of the largest entry of each row.
pub fn argmax_rows(m: &crate::tensornet::Matrix) -> Vec<usize> {
    (0..m.rows)
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
