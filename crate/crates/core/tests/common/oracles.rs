//! Independent reference implementations shared by the metric and corpus
//! test targets.

use dplora::corpus::ReportRecord;
use rand::seq::SliceRandom;
use rand::Rng;

/// Weighted F1 straight from the definitions, sharing nothing with the
/// library: per-class precision/recall from element comparisons, harmonic
/// mean, support-weighted average.
pub fn weighted_f1(preds: &[Vec<u8>], targets: &[Vec<u8>]) -> f64 {
    let n_labels = targets[0].len();
    let mut num = 0.0;
    let mut den = 0.0;
    for l in 0..n_labels {
        let pairs: Vec<(u8, u8)> = preds.iter().zip(targets).map(|(p, t)| (p[l], t[l])).collect();
        let tp = pairs.iter().filter(|&&(p, t)| p == 1 && t == 1).count() as f64;
        let pred_pos = pairs.iter().filter(|&&(p, _)| p == 1).count() as f64;
        let true_pos = pairs.iter().filter(|&&(_, t)| t == 1).count() as f64;
        let precision = if pred_pos > 0.0 { tp / pred_pos } else { 0.0 };
        let recall = if true_pos > 0.0 { tp / true_pos } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        num += f1 * true_pos;
        den += true_pos;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn random_f1_instance(rng: &mut impl Rng) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let n = rng.random_range(1..30);
    let l = rng.random_range(1..8);
    let density: f64 = rng.random_range(0.05..0.95);
    let mut draw = || -> Vec<Vec<u8>> {
        (0..n)
            .map(|_| (0..l).map(|_| u8::from(rng.random::<f64>() < density)).collect())
            .collect()
    };
    let preds = draw();
    let targets = draw();
    (preds, targets)
}

pub const CODES: [i8; 4] = [1, 0, -1, 2];

/// The label mapping by hand: +1 is the only positive code.
pub fn label_map(code: i8) -> u8 {
    u8::from(code == 1)
}

/// A shuffled corpus of 1..40 patients with 1..3 reports each.
pub fn random_records(rng: &mut impl Rng, n_labels: usize) -> Vec<ReportRecord> {
    let n_patients = rng.random_range(3..40);
    let mut out = Vec::new();
    let mut rid = 0;
    for p in 0..n_patients {
        for _ in 0..rng.random_range(1..4) {
            out.push(ReportRecord {
                patient_id: format!("p{p}"),
                report_id: format!("r{rid:04}"),
                findings: format!("f{}", rng.random_range(0..5)),
                impression: "i".into(),
                raw_labels: (0..n_labels).map(|_| CODES[rng.random_range(0..4)]).collect(),
            });
            rid += 1;
        }
    }
    out.shuffle(rng);
    out
}
