//! Nearest-embedding classification and (generalized) zero-shot metrics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// For each row of `embeddings` (`[N, D]`), the candidate class whose row
/// of `class_table` (`[C, D]`) is nearest in squared Euclidean distance.
/// Ties go to the lowest class index.
pub fn classify(embeddings: &Tensor, class_table: &Tensor, candidates: &[usize]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Empty("classify"));
    }
    let (es, cs) = (embeddings.shape(), class_table.shape());
    if es.len() != 2 || cs.len() != 2 || es[1] != cs[1] {
        return Err(Error::shape("classify", es, cs));
    }
    if let Some(&c) = candidates.iter().find(|&&c| c >= cs[0]) {
        return Err(Error::Domain {
            op: "classify",
            msg: format!("candidate {c} out of range for {} classes", cs[0]),
        });
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let d = es[1];
    let preds = embeddings
        .data()
        .chunks(d)
        .map(|row| {
            let mut best = (f64::INFINITY, sorted[0]);
            for &c in &sorted {
                let dist: f64 = row
                    .iter()
                    .zip(&class_table.data()[c * d..(c + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            best.1
        })
        .collect();
    Ok(preds)
}

/// Unweighted mean over `classes` of per-class accuracy. Classes without
/// samples are left out.
pub fn mean_class_accuracy(preds: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Empty("mean_class_accuracy"));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape("mean_class_accuracy", &[preds.len()], &[labels.len()]));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = classes.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &y) in preds.iter().zip(labels) {
        let Some(t) = tally.get_mut(&y) else {
            return Err(Error::Domain {
                op: "mean_class_accuracy",
                msg: format!("label {y} outside the class set"),
            });
        };
        t.1 += 1;
        if p == y {
            t.0 += 1;
        }
    }
    let per_class: Vec<f64> = tally
        .values()
        .filter(|(_, n)| *n > 0)
        .map(|&(hit, n)| hit as f64 / n as f64)
        .collect();
    if per_class.is_empty() {
        return Err(Error::Empty("mean_class_accuracy (no samples)"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// `2·S·U/(S+U)`, zero when both are zero.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Mean-class accuracies as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Seen-class accuracy under the all-classes candidate set.
    pub seen: f64,
    /// Unseen-class accuracy under the all-classes candidate set.
    pub unseen: f64,
    pub hm: f64,
    /// Unseen-class accuracy with candidates restricted to unseen classes.
    pub zsl: f64,
}

impl EvalReport {
    pub fn new(seen: f64, unseen: f64, zsl: f64) -> Self {
        Self {
            seen,
            unseen,
            hm: harmonic_mean(seen, unseen),
            zsl,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "S={:.2}% U={:.2}% HM={:.2}% ZSL={:.2}%",
            100.0 * self.seen,
            100.0 * self.unseen,
            100.0 * self.hm,
            100.0 * self.zsl
        )
    }
}
