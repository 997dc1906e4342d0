use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
mode = "dp-lora"
seeds = [0, 1]
epsilons = [1.0, 10.0]
ranks = [1, 2]

[model]
vocab_size = 512
max_seq_len = 24
d_model = 8
n_heads = 2
n_layers = 1
d_ff = 16
n_labels = 14
dropout_rate = 0.0

[sgd]
epochs = 1
learning_rate = 0.5
batch_size = 16

[pretrain]
public_patients = 40
epochs = 1
batch_size = 16

[corpus]
n_patients = 60
seed = 5
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dplora"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every verb in a fresh directory and returns all files produced.
fn full_pipeline() -> Vec<(PathBuf, Vec<u8>)> {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), TINY).unwrap();
    let c = ["--config", "run.toml"];
    run(dir, &[&["gen"][..], &c].concat());
    run(dir, &[&["pretrain"][..], &c].concat());
    run(dir, &[&["train"][..], &c].concat());
    run(dir, &[&["sweep"][..], &c].concat());
    run(
        dir,
        &[&["train"][..], &c, &["--mode", "lora", "--objective", "complete", "--out-dir", "mem"]].concat(),
    );
    run(
        dir,
        &[
            &["train"][..],
            &c,
            &["--objective", "complete", "--epsilons", "0.1", "--out-dir", "mem"],
        ]
        .concat(),
    );
    run(
        dir,
        &[
            &["probe"][..],
            &c,
            &[
                "--out-dir",
                "mem",
                "--model",
                "np=mem/lora_eps-inf_r-1_seed-0/model.json",
                "--model",
                "dp=mem/dp-lora_eps-0.1_r-1_seed-0/model.json",
                "--control",
            ],
        ]
        .concat(),
    );
    let files = files_under(dir);
    assert!(files.len() > 10);
    files
}

#[test]
fn reruns_are_byte_identical() {
    let a = full_pipeline();
    let b = full_pipeline();
    assert_eq!(a.len(), b.len());
    for ((pa, ba), (pb, bb)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between runs", pa.display());
    }
    let names: Vec<String> = a.iter().map(|(p, _)| p.display().to_string()).collect();
    for want in [
        "data/corpus.jsonl",
        "data/splits.tsv",
        "data/vocab.txt",
        "data/backbone.json",
        "runs/sweep_cells.csv",
        "runs/sweep_summary.csv",
        "runs/dp-lora_eps-1_r-1_seed-0/metrics.csv",
        "runs/dp-lora_eps-1_r-1_seed-0/privacy.json",
        "mem/probe_results.csv",
        "mem/probe_summary.csv",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    let cells = a.iter().find(|(p, _)| p.ends_with("sweep_cells.csv")).unwrap();
    let text = String::from_utf8(cells.1.clone()).unwrap();
    assert!(text.starts_with("# config_hash="));
    // hash line + header + 2 epsilons x 2 ranks x 2 seeds
    assert_eq!(text.lines().count(), 2 + 8);
    let summary = a.iter().find(|(p, _)| p.ends_with("mem/probe_results.csv")).unwrap();
    let text = String::from_utf8(summary.1.clone()).unwrap();
    assert!(text.contains("np/held-out"));
}

#[test]
fn sweep_resumes_and_refuses_foreign_results() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), TINY).unwrap();
    let c = ["--config", "run.toml"];
    run(dir, &[&["gen"][..], &c].concat());
    run(dir, &[&["pretrain"][..], &c].concat());
    run(dir, &[&["sweep"][..], &c, &["--seeds", "0"]].concat());
    let out = run(dir, &[&["sweep"][..], &c, &["--seeds", "0"]].concat());
    assert!(String::from_utf8_lossy(&out.stdout).contains("ran=0 resumed=4"));

    let out = bin()
        .current_dir(dir)
        .args([&["sweep"][..], &c, &["--seeds", "0", "--epochs", "2"]].concat())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing"));
}

#[test]
fn usage_and_config_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), TINY).unwrap();
    let c = ["--config", "run.toml"];
    run(dir, &[&["gen"][..], &c].concat());

    let again = bin().current_dir(dir).args([&["gen"][..], &c].concat()).output().unwrap();
    assert_eq!(again.status.code(), Some(2));
    run(dir, &[&["gen"][..], &c, &["--force"]].concat());

    let full_with_rank = bin()
        .current_dir(dir)
        .args([&["train"][..], &c, &["--mode", "full-ft"]].concat())
        .output()
        .unwrap();
    assert_eq!(full_with_rank.status.code(), Some(2));

    let one_model = bin()
        .current_dir(dir)
        .args([&["probe"][..], &c, &["--model", "a=x.json"]].concat())
        .output()
        .unwrap();
    assert_eq!(one_model.status.code(), Some(2));

    let bad_verb = bin().arg("frobnicate").output().unwrap();
    assert!(!bad_verb.status.success());
}
