//! Commands behind the command-line tool: corpus generation, backbone
//! pretraining, training, evaluation, sweeps and memorization probes.
//!
//! Every CSV written here starts with a `# config_hash=<hex>` line.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub use config::{
    CorpusSection, LoraSection, Objective, Paths, PretrainSection, RunConfig, DEFAULT_EPSILONS,
    DEFAULT_RANKS,
};

use crate::corpus::{
    aggregate_all, encode_patient, examples_for_split, generate_synthetic_corpus, read_jsonl,
    split_by_patient, validate_records, write_jsonl, Example, GeneratorConfig, PatientText,
    ReportRecord, SplitManifest, Vocabulary,
};
use crate::dp::{privacy_report, DPStepReport};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams, TokenId};
use crate::probe::{run_probe, write_probe_csv, write_summary_csv, Embedder, ProbeItem, ProbeResult};
use crate::train::{
    evaluate, pretrain_mlm, train_classifier, train_completion, AdaptSettings, TrainMode,
};

const HASH_PREFIX: &str = "# config_hash=";

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn refuse_existing(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::config(format!(
            "{} already exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

/// Writes the hash line followed by whatever `body` emits.
fn write_hashed(path: &Path, hash: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = format!("{HASH_PREFIX}{hash}\n").into_bytes();
    body(&mut buf)?;
    let mut f = create_file(path)?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Hash recorded in the first line of `path`.
pub fn read_config_hash(path: &Path) -> Result<String> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(f)
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    line.trim_end()
        .strip_prefix(HASH_PREFIX)
        .map(str::to_string)
        .ok_or_else(|| Error::data(format!("{} has no config hash header", path.display())))
}

fn write_jsonl_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = create_file(path)?;
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    let mut f = create_file(path)?;
    writeln!(f, "{text}").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

// ---------------------------------------------------------------- gen

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub reports: usize,
    pub patients: usize,
    pub split_patients: BTreeMap<String, usize>,
}

/// Writes the synthetic corpus and its patient-level split manifest.
pub fn cmd_gen(cfg: &RunConfig, force: bool) -> Result<GenSummary> {
    cfg.validate()?;
    let paths = &cfg.paths;
    refuse_existing(&[&paths.corpus, &paths.splits], force)?;
    let records = generate_synthetic_corpus(&cfg.corpus.generator)?;
    validate_records(&records, cfg.corpus.generator.schema.n_labels())?;
    let manifest = split_by_patient(&records, &cfg.corpus.ratios, cfg.corpus.generator.seed)?;
    manifest.verify(&records)?;
    if let Some(dir) = paths.corpus.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(&records, &paths.corpus)?;
    manifest.write_tsv(&records, &paths.splits)?;
    Ok(GenSummary {
        reports: records.len(),
        patients: manifest.patients.len(),
        split_patients: manifest
            .splits
            .keys()
            .map(|s| (s.clone(), manifest.patients_in(s).len()))
            .collect(),
    })
}

// ---------------------------------------------------------------- pretrain

/// Model shape for a vocabulary and label count, from the config template.
pub fn model_config(cfg: &RunConfig, vocab_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab_len,
        n_labels: cfg.corpus.generator.schema.n_labels(),
        ..cfg.model.clone()
    }
}

/// The public corpus a backbone is pretrained on: same generator settings
/// as the task corpus, different patients.
pub fn public_corpus(cfg: &RunConfig) -> Result<Vec<PatientText>> {
    let gen = GeneratorConfig {
        n_patients: cfg.pretrain.public_patients,
        seed: cfg.pretrain.public_seed,
        ..cfg.corpus.generator.clone()
    };
    aggregate_all(&generate_synthetic_corpus(&gen)?)
}

/// Builds the vocabulary from the public corpus and pretrains a backbone on
/// it with the masked-token objective.
pub fn build_backbone(
    cfg: &RunConfig,
    on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<(Vocabulary, ModelParams)> {
    let public = public_corpus(cfg)?;
    let vocab = Vocabulary::build(
        public
            .iter()
            .flat_map(|p| [p.findings.as_str(), p.impression.as_str()]),
        cfg.model.vocab_size,
    )?;
    let mc = model_config(cfg, vocab.len());
    let mut model = ModelParams::init(mc.clone(), cfg.pretrain.init_seed)?;
    let seqs: Vec<Vec<TokenId>> = public
        .iter()
        .map(|p| encode_patient(&vocab, p, mc.max_seq_len))
        .collect();
    pretrain_mlm(
        &mut model,
        &seqs,
        &cfg.pretrain.settings,
        cfg.pretrain.init_seed,
        on_step,
    )?;
    Ok((vocab, model))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
struct PretrainStep {
    step: usize,
    loss: f64,
}

/// Writes the vocabulary, the backbone checkpoint and the pretraining loss
/// log. Returns the checkpoint content hash.
pub fn cmd_pretrain(cfg: &RunConfig, force: bool) -> Result<String> {
    cfg.validate()?;
    let paths = &cfg.paths;
    refuse_existing(&[&paths.vocab, &paths.backbone], force)?;
    let mut log = Vec::new();
    let (vocab, model) = build_backbone(cfg, |step, loss| {
        log.push(PretrainStep { step, loss });
        Ok(())
    })?;
    if let Some(dir) = paths.vocab.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    vocab.save(&paths.vocab)?;
    let hash = save_checkpoint(&model, "backbone", &paths.backbone)?;
    write_jsonl_lines(&paths.backbone.with_extension("steps.jsonl"), &log)?;
    Ok(hash)
}

// ---------------------------------------------------------------- inputs

/// Corpus, manifest, vocabulary and backbone as named by the config.
pub struct Inputs {
    pub records: Vec<ReportRecord>,
    pub patients: Vec<PatientText>,
    pub manifest: SplitManifest,
    pub vocab: Vocabulary,
    pub backbone: ModelParams,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.paths;
        let records = read_jsonl(&p.corpus)?;
        validate_records(&records, cfg.corpus.generator.schema.n_labels())?;
        let manifest = SplitManifest::read_tsv(&p.splits)?;
        manifest.verify(&records)?;
        let vocab = Vocabulary::load(&p.vocab)?;
        let backbone = load_checkpoint(&p.backbone)?;
        check_vocab(&backbone, &vocab, &p.backbone)?;
        Ok(Inputs {
            patients: aggregate_all(&records)?,
            records,
            manifest,
            vocab,
            backbone,
        })
    }

    pub fn examples(&self, split: &str, max_len: usize) -> Vec<Example> {
        examples_for_split(&self.patients, &self.manifest, split, &self.vocab, max_len)
    }

    /// Findings of every report in `split`, in report-id order.
    pub fn report_items(&self, split: &str, max_len: usize) -> Vec<ProbeItem> {
        let wanted: BTreeSet<&str> = self
            .manifest
            .splits
            .get(split)
            .map(|ids| ids.iter().map(String::as_str).collect())
            .unwrap_or_default();
        let mut items: Vec<ProbeItem> = self
            .records
            .iter()
            .filter(|r| wanted.contains(r.report_id.as_str()))
            .map(|r| ProbeItem {
                report_id: r.report_id.clone(),
                ids: self.vocab.encode(&r.findings, max_len),
            })
            .collect();
        items.sort_by(|a, b| a.report_id.cmp(&b.report_id));
        items
    }
}

fn check_vocab(model: &ModelParams, vocab: &Vocabulary, path: &Path) -> Result<()> {
    if model.config.vocab_size != vocab.len() {
        return Err(Error::config(format!(
            "{} expects a vocabulary of {} tokens but the vocabulary file has {}",
            path.display(),
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- train

/// One point of the experiment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub mode: TrainMode,
    pub epsilon: Option<f64>,
    pub rank: Option<usize>,
    pub seed: u64,
}

fn fmt_opt<T: std::fmt::Display>(x: Option<T>, none: &str) -> String {
    x.map_or_else(|| none.to_string(), |v| v.to_string())
}

impl Cell {
    pub fn run_id(&self) -> String {
        format!(
            "{}_eps-{}_r-{}_seed-{}",
            self.mode.as_str(),
            fmt_opt(self.epsilon, "inf"),
            fmt_opt(self.rank, "full"),
            self.seed
        )
    }

    fn adapt(&self, cfg: &RunConfig) -> AdaptSettings {
        AdaptSettings {
            mode: self.mode,
            rank: self.rank.unwrap_or(0),
            lora_scale: cfg.lora.scale,
            lora_targets: cfg.lora.targets,
            train_head: cfg.lora.train_head,
            epsilon: self.epsilon,
        }
    }
}

/// Every cell of the configured grid, epsilon-major then rank then seed.
pub fn grid(cfg: &RunConfig) -> Vec<Cell> {
    let eps: Vec<Option<f64>> = match cfg.mode {
        TrainMode::DpLora => cfg.epsilons.iter().map(|&e| Some(e)).collect(),
        _ => vec![None],
    };
    let ranks: Vec<Option<usize>> = match cfg.mode {
        TrainMode::FullFt => vec![None],
        _ => cfg.rank_list().into_iter().map(Some).collect(),
    };
    let mut cells = Vec::new();
    for &epsilon in &eps {
        for &rank in &ranks {
            for &seed in &cfg.seeds {
                cells.push(Cell {
                    mode: cfg.mode,
                    epsilon,
                    rank,
                    seed,
                });
            }
        }
    }
    cells
}

pub struct CellOutcome {
    pub model: ModelParams,
    pub steps: Vec<DPStepReport>,
    pub privacy: crate::dp::PrivacySpec,
    /// Test-split metrics; `None` for the completion objective.
    pub metrics: Option<MetricsReport>,
}

/// Trains one cell from the backbone and, for classification, scores it
/// on the test split.
pub fn train_cell(cfg: &RunConfig, inputs: &Inputs, cell: &Cell) -> Result<CellOutcome> {
    let max_len = inputs.backbone.config.max_seq_len;
    let adapt = cell.adapt(cfg);
    let mut steps = Vec::new();
    let log = |r: &DPStepReport| {
        steps.push(r.clone());
        Ok(())
    };
    match cfg.objective {
        Objective::Classify => {
            let train = inputs.examples("train", max_len);
            let (model, privacy) =
                train_classifier(&inputs.backbone, &train, &adapt, &cfg.sgd, cell.seed, log)?;
            let metrics = evaluate(&model, &inputs.examples("test", max_len), cfg.threshold)?;
            Ok(CellOutcome {
                model,
                steps,
                privacy,
                metrics: Some(metrics),
            })
        }
        Objective::Complete => {
            let seqs: Vec<Vec<TokenId>> = inputs
                .report_items("train", max_len)
                .into_iter()
                .map(|i| i.ids)
                .collect();
            let (model, privacy) = train_completion(
                &inputs.backbone,
                &seqs,
                &adapt,
                &cfg.sgd,
                cfg.mask_fraction,
                cell.seed,
                log,
            )?;
            Ok(CellOutcome {
                model,
                steps,
                privacy,
                metrics: None,
            })
        }
    }
}

fn metrics_header(labels: &[&str]) -> Vec<String> {
    let mut h = vec!["run_id".to_string(), "mode".to_string()];
    h.extend(MetricsReport::csv_header(labels).into_iter().skip(1));
    h
}

fn metrics_row(cell: &Cell, m: &MetricsReport) -> Vec<String> {
    let mut row = m.csv_row(&cell.run_id(), cell.epsilon, cell.rank, cell.seed);
    row.insert(1, cell.mode.as_str().to_string());
    row
}

/// Where `cmd_train` put its artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub checkpoint_hash: String,
    pub metrics: Option<MetricsReport>,
}

/// Trains the first cell of the grid and writes checkpoint, step log,
/// privacy report and (for classification) a metrics CSV under
/// `out_dir/<run id>/`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let inputs = Inputs::load(cfg)?;
    let cell = grid(cfg).remove(0);
    let out = train_cell(cfg, &inputs, &cell)?;
    let dir = cfg.paths.out_dir.join(cell.run_id());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.config_hash();
    let checkpoint_hash = save_checkpoint(&out.model, &cell.run_id(), &dir.join("model.json"))?;
    write_jsonl_lines(&dir.join("steps.jsonl"), &out.steps)?;
    let taken = out.steps.len();
    write_json(&dir.join("privacy.json"), &privacy_report(&out.privacy, taken))?;
    if let Some(m) = &out.metrics {
        let labels = cfg.corpus.generator.schema.label_names();
        write_hashed(&dir.join("metrics.csv"), &hash, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(metrics_header(&labels)).map_err(csv_err)?;
            w.write_record(metrics_row(&cell, m)).map_err(csv_err)?;
            w.flush().map_err(|e| Error::Serde(e.to_string()))
        })?;
        write_json(&dir.join("metrics.json"), m)?;
    }
    Ok(TrainArtifacts {
        dir,
        checkpoint_hash,
        metrics: out.metrics,
    })
}

// ---------------------------------------------------------------- eval

/// Scores a saved classifier on `split`; returns the CSV text (hash line,
/// header, one row).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<(MetricsReport, String)> {
    cfg.validate()?;
    let inputs = Inputs::load(cfg)?;
    let model = load_checkpoint(checkpoint)?;
    check_vocab(&model, &inputs.vocab, checkpoint)?;
    let examples = inputs.examples(split, model.config.max_seq_len);
    let m = evaluate(&model, &examples, cfg.threshold)?;
    let tag = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let labels = cfg.corpus.generator.schema.label_names();
    let mut buf = format!("{HASH_PREFIX}{}\n", cfg.config_hash()).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(MetricsReport::csv_header(&labels)).map_err(csv_err)?;
        w.write_record(m.csv_row(&tag, None, None, 0)).map_err(csv_err)?;
        w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    }
    Ok((m, String::from_utf8(buf).expect("csv is utf-8")))
}

// ---------------------------------------------------------------- sweep

pub const SWEEP_CELLS: &str = "sweep_cells.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub cells_run: usize,
    pub cells_skipped: usize,
    /// `(mode, epsilon, rank) → (mean, std, n)` of weighted F1.
    pub groups: Vec<(String, String, String, f64, f64, usize)>,
}

fn read_cells(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body = text.split_once('\n').map_or("", |(_, b)| b);
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.records().map(|x| x.map_err(csv_err)).collect()
}

/// Runs every grid cell not already recorded in `sweep_cells.csv`, appending
/// one row per cell, then rewrites `sweep_summary.csv` with per-group mean
/// and sample standard deviation over seeds. A cells file written under a
/// different config hash is never mixed with this one.
pub fn cmd_sweep(cfg: &RunConfig, mut progress: impl FnMut(&Cell, &MetricsReport)) -> Result<SweepSummary> {
    cfg.validate()?;
    if cfg.objective != Objective::Classify {
        return Err(Error::config("sweep scores classifiers; use objective = classify"));
    }
    let hash = cfg.config_hash();
    let dir = &cfg.paths.out_dir;
    let cells_path = dir.join(SWEEP_CELLS);
    let labels = cfg.corpus.generator.schema.label_names();
    let mut done = BTreeSet::new();
    if cells_path.exists() {
        let found = read_config_hash(&cells_path)?;
        if found != hash {
            return Err(Error::config(format!(
                "{} was written under config {found}, not {hash}; refusing to mix results",
                cells_path.display()
            )));
        }
        for rec in read_cells(&cells_path)? {
            done.insert(rec.get(0).unwrap_or_default().to_string());
        }
    } else {
        write_hashed(&cells_path, &hash, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(metrics_header(&labels)).map_err(csv_err)?;
            w.flush().map_err(|e| Error::Serde(e.to_string()))
        })?;
    }
    let inputs = Inputs::load(cfg)?;
    let (mut ran, mut skipped) = (0, 0);
    for cell in grid(cfg) {
        if done.contains(&cell.run_id()) {
            skipped += 1;
            continue;
        }
        let out = train_cell(cfg, &inputs, &cell)?;
        let m = out.metrics.expect("classification yields metrics");
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&cells_path)
            .map_err(|e| Error::io(&cells_path, e))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(metrics_row(&cell, &m)).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        f.write_all(&bytes).map_err(|e| Error::io(&cells_path, e))?;
        progress(&cell, &m);
        ran += 1;
    }

    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for rec in read_cells(&cells_path)? {
        let key = (
            rec.get(1).unwrap_or_default().to_string(),
            rec.get(2).unwrap_or_default().to_string(),
            rec.get(3).unwrap_or_default().to_string(),
        );
        let f1: f64 = rec
            .get(5)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data(format!("bad weighted_f1 in {}", cells_path.display())))?;
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(f1);
    }
    let mut summary = Vec::new();
    for key in order {
        let xs = &groups[&key];
        let (mean, std) = crate::probe::mean_std(xs);
        let n = xs.len();
        summary.push((key.0, key.1, key.2, mean, std, n));
    }
    write_hashed(&dir.join(SWEEP_SUMMARY), &hash, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["mode", "epsilon", "rank", "mean_weighted_f1", "std_weighted_f1", "n_seeds"])
            .map_err(csv_err)?;
        for (mode, eps, rank, mean, std, n) in &summary {
            w.write_record([
                mode.clone(),
                eps.clone(),
                rank.clone(),
                format!("{mean:.6}"),
                format!("{std:.6}"),
                n.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))
    })?;
    Ok(SweepSummary {
        cells_run: ran,
        cells_skipped: skipped,
        groups: summary,
    })
}

// ---------------------------------------------------------------- probe

pub const PROBE_RESULTS: &str = "probe_results.csv";
pub const PROBE_SUMMARY: &str = "probe_summary.csv";
/// Suffix of model tags whose rows come from the held-out control reports.
pub const CONTROL_SUFFIX: &str = "/held-out";

#[derive(Clone, Debug, Default)]
pub struct ProbeOptions {
    /// Cap on probed training reports; the first ones in report-id order.
    pub max_reports: Option<usize>,
    /// Also probe test-split reports, tagged with [`CONTROL_SUFFIX`].
    pub control: bool,
    /// Tag of the checkpoint that embeds every completion; `None` means each
    /// model embeds its own.
    pub embedder: Option<String>,
}

/// Probes tagged checkpoints on training-split reports and writes
/// `probe_results.csv` and `probe_summary.csv` to `out_dir`.
pub fn cmd_probe(
    cfg: &RunConfig,
    checkpoints: &[(String, PathBuf)],
    opts: &ProbeOptions,
) -> Result<Vec<ProbeResult>> {
    cfg.validate()?;
    if checkpoints.len() < 2 {
        return Err(Error::config("probe needs at least two tagged checkpoints"));
    }
    let inputs = Inputs::load(cfg)?;
    let mut models = Vec::new();
    for (tag, path) in checkpoints {
        let m = load_checkpoint(path)?;
        check_vocab(&m, &inputs.vocab, path)?;
        models.push((tag.clone(), m));
    }
    let embed_model = match &opts.embedder {
        None => None,
        Some(tag) => Some(
            models
                .iter()
                .find(|(t, _)| t == tag)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::config(format!("embedder tag {tag} is not among the checkpoints")))?,
        ),
    };
    let embedder = embed_model.map_or(Embedder::Own, Embedder::Shared);
    let refs: Vec<(String, &ModelParams)> = models.iter().map(|(t, m)| (t.clone(), m)).collect();
    let max_len = models[0].1.config.max_seq_len;
    let mut items = inputs.report_items("train", max_len);
    if let Some(n) = opts.max_reports {
        items.truncate(n);
    }
    let mut results = run_probe(&refs, &items, cfg.mask_fraction, embedder)?;
    if opts.control {
        let mut control = inputs.report_items("test", max_len);
        if let Some(n) = opts.max_reports {
            control.truncate(n);
        }
        for mut r in run_probe(&refs, &control, cfg.mask_fraction, embedder)? {
            r.model_tag.push_str(CONTROL_SUFFIX);
            results.push(r);
        }
    }
    let hash = cfg.config_hash();
    let dir = &cfg.paths.out_dir;
    write_hashed(&dir.join(PROBE_RESULTS), &hash, |buf| write_probe_csv(&results, buf))?;
    write_hashed(&dir.join(PROBE_SUMMARY), &hash, |buf| write_summary_csv(&results, buf))?;
    Ok(results)
}
