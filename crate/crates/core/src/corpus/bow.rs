use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{tokenize_text, PatientText, SplitManifest, REPORT_SEPARATOR};
use crate::error::{Error, Result};
use crate::metrics::{confusion, weighted_f1, MetricsReport, DEFAULT_THRESHOLD};
use crate::rng::rng_for;

/// Minimum test weighted F1 for a corpus to count as learnable.
pub const BOW_GATE: f64 = 0.95;

const EPOCHS: usize = 12;
const LEARNING_RATE: f64 = 0.5;
const L2: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowReport {
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub metrics: MetricsReport,
    pub passed: bool,
}

fn features(p: &PatientText) -> Vec<String> {
    let toks = tokenize_text(&format!("{}{}{}", p.findings, REPORT_SEPARATOR, p.impression));
    let mut out: Vec<String> = toks.clone();
    out.extend(toks.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out.sort();
    out.dedup();
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One-vs-rest logistic regression on binary unigram and bigram presence
/// features, fit on the `train` split and scored on `test`.
pub fn bow_learnability(patients: &[PatientText], manifest: &SplitManifest, seed: u64) -> Result<BowReport> {
    let by_split = |split: &str| -> Vec<&PatientText> {
        patients
            .iter()
            .filter(|p| manifest.patients.get(&p.patient_id).map(String::as_str) == Some(split))
            .collect()
    };
    let (train, test) = (by_split("train"), by_split("test"));
    if train.is_empty() || test.is_empty() {
        return Err(Error::data("bag-of-words probe needs non-empty train and test splits"));
    }
    let n_labels = train[0].labels.len();

    let mut index: HashMap<String, usize> = HashMap::new();
    let train_x: Vec<Vec<usize>> = train
        .iter()
        .map(|p| {
            features(p)
                .into_iter()
                .map(|f| {
                    let next = index.len();
                    *index.entry(f).or_insert(next)
                })
                .collect()
        })
        .collect();
    let test_x: Vec<Vec<usize>> = test
        .iter()
        .map(|p| features(p).iter().filter_map(|f| index.get(f).copied()).collect())
        .collect();
    let n_features = index.len();

    let mut w = vec![0.0f64; n_features * n_labels];
    let mut bias = vec![0.0f64; n_labels];
    let score = |w: &[f64], bias: &[f64], x: &[usize], l: usize| -> f64 {
        bias[l] + x.iter().map(|&f| w[f * n_labels + l]).sum::<f64>()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..EPOCHS {
        order.shuffle(&mut rng_for(seed, "bow-epoch", epoch as u64));
        let lr = LEARNING_RATE / (1.0 + epoch as f64);
        for &i in &order {
            let x = &train_x[i];
            let step = lr / (x.len().max(1) as f64).sqrt();
            for l in 0..n_labels {
                let err = sigmoid(score(&w, &bias, x, l)) - train[i].labels[l] as f64;
                bias[l] -= lr * err;
                for &f in x {
                    let wf = &mut w[f * n_labels + l];
                    *wf -= step * (err + L2 * *wf);
                }
            }
        }
    }

    let preds: Vec<Vec<u8>> = test_x
        .iter()
        .map(|x| {
            (0..n_labels)
                .map(|l| (sigmoid(score(&w, &bias, x, l)) >= DEFAULT_THRESHOLD) as u8)
                .collect()
        })
        .collect();
    let targets: Vec<Vec<u8>> = test.iter().map(|p| p.labels.clone()).collect();
    let metrics = weighted_f1(&confusion(&preds, &targets)?);
    Ok(BowReport {
        n_train: train.len(),
        n_test: test.len(),
        n_features,
        passed: metrics.weighted_f1 >= BOW_GATE,
        metrics,
    })
}
