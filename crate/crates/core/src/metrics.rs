//! Per-class confusion counts and support-weighted F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ClassCounts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`, zero when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
    pub n_samples: usize,
}

fn check_binary(rows: &[Vec<u8>], what: &str) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if let Some(j) = row.iter().position(|&x| x > 1) {
            return Err(Error::contract(format!("{what}[{i}][{j}] = {} is not binary", row[j])));
        }
    }
    Ok(())
}

/// Per-class counts over `N×L` binary predictions and targets.
pub fn confusion(preds: &[Vec<u8>], targets: &[Vec<u8>]) -> Result<ConfusionCounts> {
    let shape = |m: &[Vec<u8>]| vec![m.len(), m.first().map_or(0, Vec::len)];
    let mismatch = || Error::Shape {
        op: "confusion",
        lhs: shape(preds),
        rhs: shape(targets),
    };
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(mismatch());
    }
    let l = targets[0].len();
    if preds.iter().chain(targets).any(|r| r.len() != l) {
        return Err(mismatch());
    }
    check_binary(preds, "preds")?;
    check_binary(targets, "targets")?;
    let mut classes = vec![ClassCounts::default(); l];
    for (p, t) in preds.iter().zip(targets) {
        for (c, (&pi, &ti)) in classes.iter_mut().zip(p.iter().zip(t)) {
            match (pi, ti) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts {
        classes,
        n_samples: preds.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub weighted_f1: f64,
    pub n_samples: usize,
    /// Set when no class has any support; `weighted_f1` is then 0.
    pub degenerate: bool,
}

/// Per-class F1 averaged with weights proportional to support.
pub fn weighted_f1(counts: &ConfusionCounts) -> MetricsReport {
    let per_class: Vec<ClassMetrics> = counts
        .classes
        .iter()
        .map(|c| ClassMetrics {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            support: c.support(),
        })
        .collect();
    let total: usize = per_class.iter().map(|c| c.support).sum();
    let weighted = if total == 0 {
        0.0
    } else {
        per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total as f64
    };
    MetricsReport {
        per_class,
        weighted_f1: weighted,
        n_samples: counts.n_samples,
        degenerate: total == 0,
    }
}

/// `1` where `p ≥ t`.
pub fn threshold(probs: &Tensor, t: f64) -> Result<Vec<Vec<u8>>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("threshold {t} outside [0,1]")));
    }
    if let Some(p) = probs.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::contract(format!("probability {p} outside [0,1]")));
    }
    Ok(probs
        .data()
        .chunks(probs.cols())
        .map(|row| row.iter().map(|&p| (p >= t) as u8).collect())
        .collect())
}

impl MetricsReport {
    pub const CSV_HEADER_PREFIX: [&'static str; 5] = ["run_id", "epsilon", "rank", "seed", "weighted_f1"];

    /// Header for [`MetricsReport::csv_row`] given the class names.
    pub fn csv_header(labels: &[&str]) -> Vec<String> {
        Self::CSV_HEADER_PREFIX
            .iter()
            .map(|s| s.to_string())
            .chain(labels.iter().map(|l| format!("f1:{l}")))
            .collect()
    }

    /// `run_id, epsilon, rank, seed, weighted_f1, per-class F1…`.
    pub fn csv_row(&self, run_id: &str, epsilon: Option<f64>, rank: Option<usize>, seed: u64) -> Vec<String> {
        let mut row = vec![
            run_id.to_string(),
            epsilon.map_or("inf".to_string(), |e| e.to_string()),
            rank.map_or("full".to_string(), |r| r.to_string()),
            seed.to_string(),
            format!("{:.6}", self.weighted_f1),
        ];
        row.extend(self.per_class.iter().map(|c| format!("{:.6}", c.f1)));
        row
    }
}
