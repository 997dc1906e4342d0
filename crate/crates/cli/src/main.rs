use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dplora::runner::{self, Objective, ProbeOptions, RunConfig};
use dplora::train::TrainMode;
use dplora::Error;

#[derive(Parser)]
#[command(name = "dplora", version, about = "DP-SGD + LoRA report classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its patient split.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing corpus and split files.
        #[arg(long)]
        force: bool,
    },
    /// Build the vocabulary and pretrain a backbone on a public corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Fine-tune one model (first seed, epsilon and rank of the config).
    Train(Common),
    /// Score a saved classifier.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the full epsilon x rank x seed grid, resuming where it stopped.
    Sweep(Common),
    /// Memorization probe over two or more tagged checkpoints.
    Probe {
        #[command(flatten)]
        common: Common,
        /// `tag=path`, repeated.
        #[arg(long = "model", value_parser = parse_tagged, required = true)]
        models: Vec<(String, PathBuf)>,
        #[arg(long)]
        max_reports: Option<usize>,
        /// Also probe held-out test reports as a control.
        #[arg(long)]
        control: bool,
        /// Tag of the checkpoint that embeds all completions.
        #[arg(long)]
        embedder: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_tagged(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((tag, path)) if !tag.is_empty() && !path.is_empty() => {
            Ok((tag.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected tag=path, got {s:?}")),
    }
}

impl Common {
    fn resolve(&self) -> dplora::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(o) = self.objective {
            c.objective = o;
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(e) = &self.epsilons {
            c.epsilons = e.clone();
        }
        if let Some(r) = &self.ranks {
            c.ranks = Some(r.clone());
        }
        if let Some(e) = self.epochs {
            c.sgd.epochs = e;
        }
        if let Some(lr) = self.lr {
            c.sgd.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            c.sgd.batch_size = b;
        }
        if let Some(clip) = self.clip {
            c.sgd.clip_norm = clip;
        }
        if let Some(n) = self.patients {
            c.corpus.generator.n_patients = n;
        }
        if let Some(s) = self.corpus_seed {
            c.corpus.generator.seed = s;
        }
        if let Some(d) = &self.data_dir {
            c.paths.corpus = d.join("corpus.jsonl");
            c.paths.splits = d.join("splits.tsv");
            c.paths.vocab = d.join("vocab.txt");
            c.paths.backbone = d.join("backbone.json");
        }
        if let Some(o) = &self.out_dir {
            c.paths.out_dir = o.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> dplora::Result<()> {
    match cli.command {
        Command::Gen { common, force } => {
            let cfg = common.resolve()?;
            let s = runner::cmd_gen(&cfg, force)?;
            println!("config_hash={}", cfg.config_hash());
            println!("reports={} patients={}", s.reports, s.patients);
            for (split, n) in &s.split_patients {
                println!("{split}: {n} patients");
            }
        }
        Command::Pretrain { common, force } => {
            let cfg = common.resolve()?;
            let hash = runner::cmd_pretrain(&cfg, force)?;
            println!("config_hash={}", cfg.config_hash());
            println!("backbone={} content_hash={hash}", cfg.paths.backbone.display());
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let a = runner::cmd_train(&cfg)?;
            println!("config_hash={}", cfg.config_hash());
            println!("run_dir={} checkpoint_hash={}", a.dir.display(), a.checkpoint_hash);
            if let Some(m) = a.metrics {
                println!("weighted_f1={:.6}", m.weighted_f1);
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = common.resolve()?;
            let (_, csv) = runner::cmd_eval(&cfg, &checkpoint, &split)?;
            print!("{csv}");
        }
        Command::Sweep(common) => {
            let cfg = common.resolve()?;
            println!("config_hash={}", cfg.config_hash());
            let s = runner::cmd_sweep(&cfg, |cell, m| {
                println!("{} weighted_f1={:.6}", cell.run_id(), m.weighted_f1);
            })?;
            println!("ran={} resumed={}", s.cells_run, s.cells_skipped);
            for (mode, eps, rank, mean, std, n) in &s.groups {
                println!("{mode} eps={eps} rank={rank}: {mean:.4} +- {std:.4} (n={n})");
            }
        }
        Command::Probe {
            common,
            models,
            max_reports,
            control,
            embedder,
        } => {
            let cfg = common.resolve()?;
            let opts = ProbeOptions {
                max_reports,
                control,
                embedder,
            };
            let results = runner::cmd_probe(&cfg, &models, &opts)?;
            println!("config_hash={}", cfg.config_hash());
            for r in &results {
                println!(
                    "{}: mean cosine {:.6} +- {:.6} over {} reports",
                    r.model_tag,
                    r.mean,
                    r.std,
                    r.cosines.len()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
