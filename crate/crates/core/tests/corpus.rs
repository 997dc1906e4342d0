mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use common::oracles::{label_map, random_records, CODES};
use dplora::corpus::*;
use dplora::rng::rng_for;
use proptest::prelude::*;
use rand::seq::SliceRandom;

#[test]
fn normalization_exhaustive() {
    for &c in &CODES {
        assert_eq!(normalize_labels(&[c]).unwrap(), vec![label_map(c)]);
    }
    // every length-4 vector over the four codes
    for a in CODES {
        for b in CODES {
            for c in CODES {
                for d in CODES {
                    let got = normalize_labels(&[a, b, c, d]).unwrap();
                    let want: Vec<u8> = [a, b, c, d].iter().map(|&x| label_map(x)).collect();
                    assert_eq!(got, want);
                    // idempotent on the output range
                    let again: Vec<i8> = got.iter().map(|&x| x as i8).collect();
                    assert_eq!(normalize_labels(&again).unwrap(), got);
                }
            }
        }
    }
    assert_eq!(normalize_labels(&[1, 0, -1, 2]).unwrap(), vec![1, 0, 0, 0]);
    for bad in [-2i8, 3, 5, i8::MIN, i8::MAX] {
        let err = normalize_labels(&[1, 0, bad]).unwrap_err().to_string();
        assert!(err.contains("position 2"), "{err}");
    }
}

#[test]
fn split_disjointness_over_random_corpora() {
    let ratio_sets: [&[f64]; 4] = [&[0.8, 0.1, 0.1], &[1.0], &[0.5, 0.5], &[0.34, 0.33, 0.33]];
    for case in 0..1000u64 {
        let mut rng = rng_for(99, "split-oracle", case);
        let records = random_records(&mut rng, 3);
        let ratios = ratio_sets[case as usize % ratio_sets.len()];
        let n_patients = records.iter().map(|r| &r.patient_id).collect::<BTreeSet<_>>().len();
        let m = match split_by_patient(&records, ratios, case) {
            Ok(m) => m,
            Err(_) => {
                assert!(n_patients < ratios.len());
                continue;
            }
        };
        m.verify(&records).unwrap();
        // brute-force pairwise intersection of patient sets
        let sets: Vec<BTreeSet<&str>> = m.splits.keys().map(|s| m.patients_in(s)).collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].is_disjoint(&sets[j]), "case {case}");
            }
        }
        assert_eq!(sets.iter().map(BTreeSet::len).sum::<usize>(), n_patients);
        let report_split: BTreeMap<&str, &str> = m
            .splits
            .iter()
            .flat_map(|(s, ids)| ids.iter().map(move |id| (id.as_str(), s.as_str())))
            .collect();
        assert_eq!(report_split.len(), records.len());
        for r in &records {
            assert_eq!(report_split[r.report_id.as_str()], m.patients[&r.patient_id]);
        }
    }
}

#[test]
fn split_edge_cases() {
    let one = vec![ReportRecord {
        patient_id: "p".into(),
        report_id: "r".into(),
        findings: "x".into(),
        impression: "y".into(),
        raw_labels: vec![1],
    }];
    let m = split_by_patient(&one, &[1.0], 0).unwrap();
    assert_eq!(m.patients["p"], "train");
    assert!(split_by_patient(&one, &[0.8, 0.1, 0.1], 0).is_err());
    assert!(split_by_patient(&one, &[0.5, 0.4], 0).is_err());
}

#[test]
fn split_ratios_follow_patient_counts() {
    let records = generate_synthetic_corpus(&GeneratorConfig {
        n_patients: 500,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let m = split_by_patient(&records, &[0.8, 0.1, 0.1], 4).unwrap();
    let counts: Vec<usize> = SPLIT_NAMES.iter().map(|s| m.patients_in(s).len()).collect();
    assert_eq!(counts, vec![400, 50, 50]);
}

#[test]
fn aggregation_orders_and_is_idempotent() {
    let mk = |rid: &str, f: &str, labels: Vec<i8>| ReportRecord {
        patient_id: "p1".into(),
        report_id: rid.into(),
        findings: f.into(),
        impression: format!("imp {f}"),
        raw_labels: labels,
    };
    let a = mk("r2", "second", vec![0, -1, 1]);
    let b = mk("r1", "first", vec![2, 0, 0]);
    let p = aggregate_patient_text(&[&a, &b]).unwrap();
    assert_eq!(p.findings, format!("first{REPORT_SEPARATOR}second"));
    assert_eq!(p.labels, vec![0, 0, 1]);
    assert_eq!(p.report_ids, vec!["r1", "r2"]);

    let single = aggregate_patient_text(&[&a]).unwrap();
    assert_eq!((single.findings.as_str(), single.impression.as_str()), ("second", "imp second"));

    // re-aggregating the aggregate as a single record changes nothing
    let as_record = ReportRecord {
        patient_id: p.patient_id.clone(),
        report_id: "r0".into(),
        findings: p.findings.clone(),
        impression: p.impression.clone(),
        raw_labels: p.labels.iter().map(|&x| x as i8).collect(),
    };
    let twice = aggregate_patient_text(&[&as_record]).unwrap();
    assert_eq!((twice.findings, twice.impression, twice.labels), (p.findings, p.impression, p.labels));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dedup_survivors_ignore_input_order(seed in any::<u64>(), perm in any::<u64>()) {
        let mut rng = rng_for(seed, "dedup", 0);
        let mut records = random_records(&mut rng, 2);
        // plant exact duplicates under fresh report ids
        let extra: Vec<ReportRecord> = records
            .iter()
            .take(5)
            .enumerate()
            .map(|(i, r)| ReportRecord { report_id: format!("z{i}"), ..r.clone() })
            .collect();
        records.extend(extra);
        let base: HashSet<ReportRecord> = dedup(&records).into_iter().collect();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng_for(perm, "perm", 0));
        let other: HashSet<ReportRecord> = dedup(&shuffled).into_iter().collect();
        prop_assert_eq!(&base, &other);
        // survivors are pairwise distinct on the duplicate key
        let keys: BTreeSet<_> = base
            .iter()
            .map(|r| (&r.patient_id, &r.findings, &r.impression, &r.raw_labels))
            .collect();
        prop_assert_eq!(keys.len(), base.len());
        prop_assert!(base.iter().all(|r| !r.report_id.starts_with('z')));
    }

    #[test]
    fn tokenization_is_stable(words in proptest::collection::vec("[A-Za-z]{1,8}|[.,;:()]|[0-9]{1,3}", 1..30)) {
        let text = words.join(" ");
        let vocab = Vocabulary::build([text.as_str()], 64).unwrap();
        let a = vocab.encode(&text, 256);
        let b = vocab.encode(&text, 256);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a[0], CLS);
        let decoded = vocab.decode(&vocab.ids(&text));
        prop_assert_eq!(vocab.ids(&decoded), vocab.ids(&text));
        prop_assert_eq!(tokenize_text(&tokenize_text(&text).join(" ")), tokenize_text(&text));
    }
}

#[test]
fn tokenizer_examples() {
    let vocab = Vocabulary::build(["Mild cardiomegaly. Mild effusion"], 16).unwrap();
    let ids = vocab.encode("Mild cardiomegaly.", 16);
    assert_eq!(ids, vec![CLS, vocab.id("mild"), vocab.id("cardiomegaly"), vocab.id(".")]);
    assert_eq!(vocab.id("pneumothorax"), UNK);
    assert_eq!(vocab.encode("mild mild mild", 2), vec![CLS, vocab.id("mild")]);
    assert!(Vocabulary::build(std::iter::empty(), 16).is_err());
}

#[test]
fn vocabulary_is_reproducible() {
    let records = generate_synthetic_corpus(&GeneratorConfig {
        n_patients: 100,
        ..Default::default()
    })
    .unwrap();
    let texts = || records.iter().map(|r| r.findings.as_str());
    let a = Vocabulary::build(texts(), 200).unwrap();
    let b = Vocabulary::build(texts(), 200).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    a.save(&dir.path().join("v.txt")).unwrap();
    assert_eq!(Vocabulary::load(&dir.path().join("v.txt")).unwrap(), a);
}

#[test]
fn generator_is_deterministic() {
    let cfg = GeneratorConfig {
        n_patients: 50,
        seed: 12,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_jsonl(&generate_synthetic_corpus(&cfg).unwrap(), &pa).unwrap();
    write_jsonl(&generate_synthetic_corpus(&cfg).unwrap(), &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let back = read_jsonl(&pa).unwrap();
    assert_eq!(back, generate_synthetic_corpus(&cfg).unwrap());
    let other = generate_synthetic_corpus(&GeneratorConfig { seed: 13, ..cfg }).unwrap();
    assert_ne!(back, other);
}

#[test]
fn generator_shape() {
    let records = generate_synthetic_corpus(&GeneratorConfig {
        n_patients: 300,
        ..Default::default()
    })
    .unwrap();
    validate_records(&records, 14).unwrap();
    let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *per_patient.entry(&r.patient_id).or_default() += 1;
    }
    assert_eq!(per_patient.len(), 300);
    assert!(per_patient.values().all(|&n| (1..=3).contains(&n)));
    let codes: BTreeSet<i8> = records.iter().flat_map(|r| r.raw_labels.iter().copied()).collect();
    assert_eq!(codes, [-1, 0, 1, 2].into_iter().collect());
}

#[test]
fn label_marginals_match_prevalences() {
    for schema in [Schema::Chest14, Schema::Ct18] {
        let records = generate_synthetic_corpus(&GeneratorConfig {
            schema,
            n_patients: 2000,
            seed: 2024,
            ..Default::default()
        })
        .unwrap();
        // a label is planted for a patient iff some report codes it nonzero
        let mut planted: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
        for r in &records {
            let row = planted
                .entry(&r.patient_id)
                .or_insert_with(|| vec![false; schema.n_labels()]);
            for (p, &c) in row.iter_mut().zip(&r.raw_labels) {
                *p |= c != 0;
            }
        }
        let n = planted.len() as f64;
        for (l, want) in schema.prevalences().into_iter().enumerate() {
            let got = planted.values().filter(|row| row[l]).count() as f64 / n;
            assert!(
                (got - want).abs() <= 0.03,
                "{schema:?} label {l}: {got:.3} vs {want:.3}"
            );
        }
    }
}

#[test]
fn bag_of_words_gate() {
    let records = generate_synthetic_corpus(&GeneratorConfig {
        n_patients: 2000,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let patients = aggregate_all(&records).unwrap();
    let manifest = split_by_patient(&records, &[0.8, 0.1, 0.1], 8).unwrap();
    let report = bow_learnability(&patients, &manifest, 8).unwrap();
    assert!(report.passed, "bag-of-words F1 {}", report.metrics.weighted_f1);
    assert!(report.metrics.weighted_f1 >= BOW_GATE);
}
