//! `fewshot`: generate, preprocess, split, train, search, evaluate, report.
//!
//! Every subcommand writes `manifest.json` (resolved config, seed, input
//! digests and format versions) into its output directory before doing any
//! work, and refuses to overwrite existing files.

pub mod config;
pub mod error;
pub mod report;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fewshot_autodiff::FORMAT_VERSION;
use fewshot_core::dataset::Dataset;
use fewshot_core::eval::{
    evaluate, final_evaluation, random_search, train_with_early_stop_observed, ExperimentConfig, FinalReport,
    MetricsReport,
};
use fewshot_core::labels::ClassId;
use fewshot_core::preprocess::load_dir;
use fewshot_core::split::{check_split, solve_split, SplitSpec};
use fewshot_core::synth::{export_csv, generate, sha256_hex, DatasetManifest, FileDigest};
use serde::{Deserialize, Serialize};

pub use config::PipelineConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "fewshot", version, about = "Few-shot time-series classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel trials or repeats. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Progress on stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Turn a directory of raw CSV recordings into a dataset.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Directory of `*.csv` recordings.
        #[arg(long)]
        input: PathBuf,
    },
    /// Partition a dataset into train, validation and test labels.
    Split {
        #[command(flatten)]
        common: Common,
        /// Directory holding `dataset.bin`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train one configuration with early stopping and score it on test episodes.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory of `split`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Random hyperparameter search scored by validation F1.
    Search {
        #[command(flatten)]
        common: Common,
        /// Output directory of `split`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Repeated retraining and test evaluation.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of `split`.
        #[arg(long)]
        input: PathBuf,
        /// `best_config.json` written by `search`; replaces the experiment
        /// section of the config.
        #[arg(long)]
        best: Option<PathBuf>,
    },
    /// Summary tables from the `metrics.json` of one or more `eval` runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// `eval` output directories.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Preprocess { .. } => "preprocess",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Search { .. } => "search",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Gen { common }
            | Command::Preprocess { common, .. }
            | Command::Split { common, .. }
            | Command::Train { common, .. }
            | Command::Search { common, .. }
            | Command::Eval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Formats {
    pub dataset: String,
    pub params: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub workers: usize,
    pub config: PipelineConfig,
    pub inputs: Vec<FileDigest>,
    pub formats: Formats,
}

/// Result of `train`: the test scores of the early-stopped model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub test: MetricsReport,
}

/// Creates `dir/name` with `bytes`, failing if it already exists.
fn write_new(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => CliError::Exists(path.display().to_string()),
            _ => CliError::io(&path, e),
        })?;
    f.write_all(bytes).map_err(|e| CliError::io(&path, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: dir.join(name).display().to_string(),
        source,
    })?;
    text.push('\n');
    write_new(dir, name, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(FileDigest {
        file: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Digests of the files a subcommand reads, in a fixed order.
fn input_files(cmd: &Command) -> Result<Vec<PathBuf>> {
    let split_files = |dir: &Path| ["split.json", "train.bin", "val.bin", "test.bin"].map(|f| dir.join(f)).to_vec();
    Ok(match cmd {
        Command::Gen { .. } => Vec::new(),
        Command::Preprocess { input, .. } => {
            let mut files: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| CliError::io(input, e))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()
                .map_err(|e| CliError::io(input, e))?;
            files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")));
            files.sort();
            files
        }
        Command::Split { input, .. } => vec![input.join("dataset.bin")],
        Command::Train { input, .. } | Command::Search { input, .. } => split_files(input),
        Command::Eval { input, best, .. } => {
            let mut files = split_files(input);
            files.extend(best.iter().cloned());
            files
        }
        Command::Report { input, .. } => input.iter().map(|d| d.join("metrics.json")).collect(),
    })
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let cfg = cfg.resolve(common.seed);
    cfg.validate()?;
    Ok(cfg)
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn load_splits(dir: &Path) -> Result<Splits> {
    let load = |name: &str| Dataset::load(&dir.join(name)).map_err(CliError::from);
    Ok(Splits {
        train: load("train.bin")?,
        val: load("val.bin")?,
        test: load("test.bin")?,
    })
}

fn save_dataset(dir: &Path, name: &str, ds: &Dataset) -> Result<()> {
    write_new(dir, name, &ds.to_bytes())
}

/// Runs one subcommand.
pub fn run(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    let common = cmd.common();
    if common.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let cfg = load_config(common)?;
    let out = &common.out;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let inputs = input_files(cmd)?.iter().map(|p| digest(p)).collect::<Result<Vec<_>>>()?;
    write_json(
        out,
        "manifest.json",
        &RunManifest {
            tool: "fewshot".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: cmd.name().into(),
            seed: cfg.seed,
            workers: common.workers,
            config: cfg.clone(),
            inputs,
            formats: Formats {
                dataset: "FSLDATA1".into(),
                params: FORMAT_VERSION,
            },
        },
    )?;
    let log = |msg: String| {
        if common.verbose {
            eprintln!("{msg}");
        }
    };

    match cmd {
        Command::Gen { .. } => {
            let ds = generate(&cfg.synth)?;
            log(format!("generated {} samples in {} classes", ds.len(), ds.classes().len()));
            save_dataset(out, "dataset.bin", &ds)?;
            write_json(out, "classes.json", &ds.class_summary())?;
            if cfg.export_csv {
                let raw = out.join("raw");
                if raw.exists() {
                    return Err(CliError::Exists(raw.display().to_string()));
                }
                let files = export_csv(&ds, &raw, &cfg.preprocess)?;
                log(format!("wrote {} CSV recordings", files.len()));
                write_json(
                    out,
                    "dataset_manifest.json",
                    &DatasetManifest {
                        config: cfg.synth.clone(),
                        preprocess: cfg.preprocess,
                        files,
                    },
                )?;
            }
        }
        Command::Preprocess { input, .. } => {
            let ds = load_dir(input, &cfg.preprocess, cfg.synth.width)?;
            log(format!("loaded {} recordings", ds.len()));
            save_dataset(out, "dataset.bin", &ds)?;
            write_json(out, "classes.json", &ds.class_summary())?;
        }
        Command::Split { input, .. } => {
            let ds = Dataset::load(&input.join("dataset.bin"))?;
            let counts = ds.class_counts();
            let labels: BTreeSet<ClassId> = counts.keys().copied().collect();
            let spec = solve_split(&labels, &counts, cfg.split.ratio, cfg.split.max_abandoned, ds.width())?;
            debug_assert!(check_split(&spec).is_empty());
            log(format!(
                "train {:?} val {:?} test {:?} abandoned {:?}",
                spec.train, spec.val, spec.test, spec.abandoned
            ));
            write_json(out, "split.json", &spec)?;
            let subset = |s: &BTreeSet<ClassId>| ds.subset(&s.iter().copied().collect::<Vec<_>>());
            save_dataset(out, "train.bin", &subset(&spec.train)?)?;
            save_dataset(out, "val.bin", &subset(&spec.val)?)?;
            save_dataset(out, "test.bin", &subset(&spec.test)?)?;
        }
        Command::Train { input, .. } => {
            let _: SplitSpec = read_json(&input.join("split.json"))?;
            let s = load_splits(input)?;
            let exp = &cfg.experiment;
            let outcome = train_with_early_stop_observed(exp, &s.train, &s.val, |r| {
                log(format!(
                    "epoch {}: train loss {:.4}, val loss {:.4}, val F1 {:.4}",
                    r.epoch, r.train_loss, r.val_loss, r.val_f1
                ))
            })?;
            write_json(out, "history.json", &outcome.history)?;
            let (test, _) = evaluate(exp, &outcome.params, &s.test, &exp.test_episodes(&s.test)?)?;
            log(format!("test weighted F1 {:.4}", test.weighted.f1));
            for f in ["params.bin", "params.json"] {
                if out.join(f).exists() {
                    return Err(CliError::Exists(out.join(f).display().to_string()));
                }
            }
            outcome.params.save(out, "params")?;
            write_json(
                out,
                "metrics.json",
                &TrainMetrics {
                    best_epoch: outcome.best_epoch,
                    best_val_f1: outcome.best_val_f1,
                    test,
                },
            )?;
        }
        Command::Search { input, .. } => {
            let s = load_splits(input)?;
            let res = random_search(
                &cfg.experiment,
                cfg.search.trials,
                cfg.search.sample_architecture,
                common.workers,
                &s.train,
                &s.val,
            )?;
            for t in &res.trials {
                match (&t.val_f1, &t.error) {
                    (Some(f), _) => log(format!("trial {}: val F1 {f:.4}", t.index)),
                    (None, Some(e)) => log(format!("trial {}: failed: {e}", t.index)),
                    _ => {}
                }
            }
            log(format!("best trial {}", res.best_index));
            write_json(out, "trials.json", &res)?;
            write_json(out, "best_config.json", &res.best)?;
        }
        Command::Eval { input, best, .. } => {
            let s = load_splits(input)?;
            let mut exp = cfg.experiment.clone();
            if let Some(path) = best {
                exp = read_json::<ExperimentConfig>(path)?;
                exp.validate()?;
                exp.seed = cfg.seed;
            }
            let report = final_evaluation(&exp, &s.train, &s.val, &s.test, cfg.evaluation.repeats, common.workers)?;
            for (i, r) in report.repeats.iter().enumerate() {
                log(format!("repeat {i}: test F1 {:.4}", r.test.weighted.f1));
            }
            write_json(out, "metrics.json", &report)?;
            let text = report::render(std::slice::from_ref(&report));
            write_new(out, "report.txt", text.as_bytes())?;
            log(text);
        }
        Command::Report { input, .. } => {
            let reports = input
                .iter()
                .map(|d| read_json::<FinalReport>(&d.join("metrics.json")))
                .collect::<Result<Vec<_>>>()?;
            let text = report::render(&reports);
            write_new(out, "report.txt", text.as_bytes())?;
            print!("{text}");
        }
    }
    Ok(())
}
