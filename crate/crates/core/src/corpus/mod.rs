//! Report records, label normalization, patient aggregation, splitting,
//! tokenization and the synthetic corpus generator.

mod bow;
mod synth;
mod vocab;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::rng::rng_for;

pub use bow::{bow_learnability, BowReport, BOW_GATE};
pub use synth::{generate_synthetic_corpus, GeneratorConfig, Schema};
pub use vocab::{tokenize_text, Vocabulary, CLS, MASK, PAD, RESERVED, SEP, UNK};

/// Separator placed between sections of different reports when a patient's
/// reports are aggregated.
pub const REPORT_SEPARATOR: &str = " [SEP] ";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReportRecord {
    pub patient_id: String,
    pub report_id: String,
    pub findings: String,
    pub impression: String,
    /// One code per schema label, each in {1, 0, -1, 2}.
    pub raw_labels: Vec<i8>,
}

/// Maps `+1 → 1` and `0, −1, +2 → 0`. Any other code is a data error that
/// names its position.
pub fn normalize_labels(raw: &[i8]) -> Result<Vec<u8>> {
    raw.iter()
        .enumerate()
        .map(|(pos, &code)| match code {
            1 => Ok(1),
            0 | -1 | 2 => Ok(0),
            other => Err(Error::data(format!(
                "label code {other} at position {pos} is not one of +1, 0, -1, +2"
            ))),
        })
        .collect()
}

/// Unified findings and impression of one patient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientText {
    pub patient_id: String,
    pub findings: String,
    pub impression: String,
    /// Element-wise maximum of the normalized labels of every report.
    pub labels: Vec<u8>,
    pub report_ids: Vec<String>,
}

/// Concatenates the sections of one patient's reports in report-id order,
/// joined by [`REPORT_SEPARATOR`].
pub fn aggregate_patient_text(records: &[&ReportRecord]) -> Result<PatientText> {
    let first = records
        .first()
        .ok_or_else(|| Error::contract("aggregate_patient_text needs at least one record"))?;
    if let Some(r) = records.iter().find(|r| r.patient_id != first.patient_id) {
        return Err(Error::contract(format!(
            "records of patients {} and {} mixed in one aggregation",
            first.patient_id, r.patient_id
        )));
    }
    let mut sorted: Vec<&ReportRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.report_id.cmp(&b.report_id));
    let n_labels = first.raw_labels.len();
    let mut labels = vec![0u8; n_labels];
    for r in &sorted {
        if r.raw_labels.len() != n_labels {
            return Err(Error::data(format!(
                "report {} has {} labels, expected {n_labels}",
                r.report_id,
                r.raw_labels.len()
            )));
        }
        for (l, x) in labels.iter_mut().zip(normalize_labels(&r.raw_labels)?) {
            *l = (*l).max(x);
        }
    }
    let join = |f: fn(&ReportRecord) -> &str| {
        sorted
            .iter()
            .map(|r| f(r))
            .collect::<Vec<_>>()
            .join(REPORT_SEPARATOR)
    };
    Ok(PatientText {
        patient_id: first.patient_id.clone(),
        findings: join(|r| &r.findings),
        impression: join(|r| &r.impression),
        labels,
        report_ids: sorted.iter().map(|r| r.report_id.clone()).collect(),
    })
}

/// Groups records by patient (patients in id order) and aggregates each.
pub fn aggregate_all(records: &[ReportRecord]) -> Result<Vec<PatientText>> {
    let mut by_patient: BTreeMap<&str, Vec<&ReportRecord>> = BTreeMap::new();
    for r in records {
        by_patient.entry(&r.patient_id).or_default().push(r);
    }
    by_patient
        .values()
        .map(|rs| aggregate_patient_text(rs))
        .collect()
}

/// Collapses records that agree on patient, both sections and raw labels,
/// keeping the smallest report id. Survivors keep their input order.
pub fn dedup(records: &[ReportRecord]) -> Vec<ReportRecord> {
    type Key<'a> = (&'a str, &'a str, &'a str, &'a [i8]);
    let mut keep: BTreeMap<Key<'_>, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = (
            r.patient_id.as_str(),
            r.findings.as_str(),
            r.impression.as_str(),
            r.raw_labels.as_slice(),
        );
        keep.entry(key)
            .and_modify(|j| {
                if r.report_id < records[*j].report_id {
                    *j = i;
                }
            })
            .or_insert(i);
    }
    let survivors: BTreeSet<usize> = keep.into_values().collect();
    survivors.into_iter().map(|i| records[i].clone()).collect()
}

/// Rejects duplicate report ids and label vectors of the wrong length.
pub fn validate_records(records: &[ReportRecord], n_labels: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for (line, r) in records.iter().enumerate() {
        if !seen.insert(r.report_id.as_str()) {
            return Err(Error::data(format!(
                "record {line}: duplicate report id {}",
                r.report_id
            )));
        }
        if r.raw_labels.len() != n_labels {
            return Err(Error::data(format!(
                "record {line}: {} labels, schema has {n_labels}",
                r.raw_labels.len()
            )));
        }
        normalize_labels(&r.raw_labels)
            .map_err(|e| Error::data(format!("record {line}: {e}")))?;
    }
    Ok(())
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    /// Split name → report ids, in report-id order.
    pub splits: BTreeMap<String, Vec<String>>,
    /// Patient id → split name.
    pub patients: BTreeMap<String, String>,
}

impl SplitManifest {
    pub fn patients_in(&self, split: &str) -> BTreeSet<&str> {
        self.patients
            .iter()
            .filter(|(_, s)| s.as_str() == split)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    /// Checks pairwise disjointness of patient sets and that every report
    /// sits in its patient's split.
    pub fn verify(&self, records: &[ReportRecord]) -> Result<()> {
        let names: Vec<&String> = self.splits.keys().collect();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                let pa = self.patients_in(a);
                if let Some(p) = self.patients_in(b).intersection(&pa).next() {
                    return Err(Error::data(format!("patient {p} in both {a} and {b}")));
                }
            }
        }
        let split_of: BTreeMap<&str, &str> = self
            .splits
            .iter()
            .flat_map(|(s, ids)| ids.iter().map(move |id| (id.as_str(), s.as_str())))
            .collect();
        for r in records {
            let want = self.patients.get(&r.patient_id).map(String::as_str);
            if split_of.get(r.report_id.as_str()).copied() != want || want.is_none() {
                return Err(Error::data(format!(
                    "report {} is not in the split of patient {}",
                    r.report_id, r.patient_id
                )));
            }
        }
        Ok(())
    }

    /// Tab-separated `split, patient_id, report_id` lines under a header.
    pub fn write_tsv(&self, records: &[ReportRecord], path: &Path) -> Result<()> {
        let mut out = String::from("split\tpatient_id\treport_id\n");
        let mut rows: Vec<(&str, &str, &str)> = records
            .iter()
            .filter_map(|r| {
                self.patients
                    .get(&r.patient_id)
                    .map(|s| (s.as_str(), r.patient_id.as_str(), r.report_id.as_str()))
            })
            .collect();
        rows.sort();
        for (s, p, r) in rows {
            out.push_str(&format!("{s}\t{p}\t{r}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = SplitManifest::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let parts: Vec<&str> = line.split('\t').collect();
            let [split, patient, report] = parts[..] else {
                return Err(Error::data(format!("{}:{}: expected 3 fields", path.display(), i + 1)));
            };
            if let Some(prev) = m.patients.insert(patient.to_string(), split.to_string()) {
                if prev != split {
                    return Err(Error::data(format!("patient {patient} listed in {prev} and {split}")));
                }
            }
            m.splits.entry(split.to_string()).or_default().push(report.to_string());
        }
        for ids in m.splits.values_mut() {
            ids.sort();
        }
        Ok(m)
    }
}

/// Patient counts per split: largest-remainder rounding of `ratios · n`,
/// then any empty split with a positive ratio borrows from the largest.
fn split_counts(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..counts.len() {
        if counts[i] == 0 && ratios[i] > 0.0 {
            let big = (0..counts.len()).max_by_key(|&j| (counts[j], usize::MAX - j)).unwrap();
            if counts[big] > 1 {
                counts[big] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Shuffles patients by `seed` and cuts them by cumulative ratio. Split
/// names follow [`SPLIT_NAMES`] for up to three ratios.
pub fn split_by_patient(records: &[ReportRecord], ratios: &[f64], seed: u64) -> Result<SplitManifest> {
    if ratios.is_empty() || ratios.len() > SPLIT_NAMES.len() {
        return Err(Error::config(format!("expected 1 to 3 split ratios, got {}", ratios.len())));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut patients: Vec<&str> = records
        .iter()
        .map(|r| r.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if patients.len() < ratios.len() {
        return Err(Error::data(format!(
            "{} patients cannot fill {} splits",
            patients.len(),
            ratios.len()
        )));
    }
    patients.shuffle(&mut rng_for(seed, "split", 0));
    let counts = split_counts(patients.len(), ratios);
    let mut manifest = SplitManifest::default();
    let mut it = patients.into_iter();
    for (name, &count) in SPLIT_NAMES.iter().zip(&counts) {
        manifest.splits.insert(name.to_string(), Vec::new());
        for p in it.by_ref().take(count) {
            manifest.patients.insert(p.to_string(), name.to_string());
        }
    }
    for r in records {
        let split = &manifest.patients[&r.patient_id];
        manifest.splits.get_mut(split).expect("split exists").push(r.report_id.clone());
    }
    for ids in manifest.splits.values_mut() {
        ids.sort();
    }
    Ok(manifest)
}

pub fn write_jsonl(records: &[ReportRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ReportRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ReportRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// A tokenized patient ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub patient_id: String,
    pub ids: Vec<TokenId>,
    pub labels: Vec<u8>,
}

/// Model input for one patient: `[CLS] findings [SEP] impression`,
/// truncated to `max_len`.
pub fn encode_patient(vocab: &Vocabulary, p: &PatientText, max_len: usize) -> Vec<TokenId> {
    let text = format!("{}{}{}", p.findings, REPORT_SEPARATOR, p.impression);
    vocab.encode(&text, max_len)
}

/// Examples for the patients of `split`, in patient-id order.
pub fn examples_for_split(
    patients: &[PatientText],
    manifest: &SplitManifest,
    split: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<Example> {
    patients
        .iter()
        .filter(|p| manifest.patients.get(&p.patient_id).map(String::as_str) == Some(split))
        .map(|p| Example {
            patient_id: p.patient_id.clone(),
            ids: encode_patient(vocab, p, max_len),
            labels: p.labels.clone(),
        })
        .collect()
}
