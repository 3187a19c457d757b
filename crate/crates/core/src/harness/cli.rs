//! Command-line front end. The `multifusion` binary only parses arguments
//! and calls [`run`].

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::checkpoint::{load_checkpoint, load_language_model, save_checkpoint, save_language_model, Checkpoint};
use super::config::TrainConfig;
use super::dataset::{generate_synthetic_dataset, ingest_dataset, Dataset};
use super::gradcheck::{gradcheck_module, GRADCHECK_MODULES, GRADCHECK_TOLERANCE};
use super::metrics::{write_metrics_csv, MetricRow, Metrics};
use super::model::evaluate_model;
use super::report::{build_report, METRICS_FILE};
use super::train::{pretrain_language_model, train_with_language_model, TrainOutcome};
use crate::error::{Error, Result};
use crate::textknow::{fetch_description, render_cot_prompts, replay_documents, ClientMode, Fixture, TextCorpus};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const LM_TRACE_FILE: &str = "lm_trace.csv";

pub fn fold_checkpoint_name(fold: usize) -> String {
    format!("fold{fold}.ckpt")
}

#[derive(Debug, Parser)]
#[command(name = "multifusion", version, about = "Electron micrograph classifier: training, evaluation and tooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// K-fold training; writes config, metrics, traces and one checkpoint per fold.
    Train(TrainArgs),
    /// Metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Renders the prompt suite for a category and fetches its descriptions.
    Describe(DescribeArgs),
    /// Masked-LM pretraining on the description corpus.
    PretrainLm(PretrainArgs),
    /// Finite-difference gradient check of the trainable modules.
    Gradcheck(GradcheckArgs),
    /// Summary CSV and SVG charts for one or more run directories.
    Report(ReportArgs),
}

/// Where the images come from: a directory tree or generated textures.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct DataSource {
    /// Root with one subdirectory of PNG/JPEG files per category.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Generate N synthetic images per class instead.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SyntheticShape {
    /// Number of synthetic classes.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Side length of synthetic images in pixels.
    #[arg(long, default_value_t = 112)]
    pub size: usize,
    /// Seed of the synthetic generator; defaults to the run seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

fn load_dataset(src: &DataSource, shape: &SyntheticShape, seed: u64) -> Result<Dataset> {
    match (&src.data, src.synthetic) {
        (Some(dir), _) => ingest_dataset(dir),
        (None, Some(n)) => generate_synthetic_dataset(shape.classes, n, shape.size, shape.data_seed.unwrap_or(seed)),
        (None, None) => Err(Error::InvalidArgument("need --data or --synthetic".into())),
    }
}

fn load_fixture(path: Option<&Path>) -> Result<Fixture> {
    path.map_or_else(|| Ok(Fixture::bundled()), Fixture::load)
}

/// Flags that override individual configuration values.
#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Train only the first N folds.
    #[arg(long)]
    pub max_folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub mlm_epochs: Option<usize>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(d, epochs, batch, lr, folds, seed, image_size, mlm_epochs);
        if self.max_folds.is_some() {
            cfg.max_folds = self.max_folds;
        }
    }
}

/// Configuration file (or defaults) with flag overrides applied, validated.
pub fn resolve_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: DataSource,
    #[command(flatten)]
    pub shape: SyntheticShape,
    /// TOML file of `key = value` configuration lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Description fixture (JSONL); defaults to the bundled one.
    #[arg(long, value_name = "FILE")]
    pub fixture: Option<PathBuf>,
    /// Pretrained language model from `pretrain-lm`; pretrains one otherwise.
    #[arg(long, value_name = "FILE")]
    pub lm: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub source: DataSource,
    #[command(flatten)]
    pub shape: SyntheticShape,
    /// Also write the metrics as CSV rows.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[arg(long)]
    pub category: String,
    #[arg(long, default_value = "replay")]
    pub mode: ClientMode,
    /// Fixture to replay from or record into; replay defaults to the bundled one.
    #[arg(long, value_name = "FILE")]
    pub fixture: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, value_name = "FILE")]
    pub fixture: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// One of the trainable modules; all of them when omitted.
    #[arg(long)]
    pub module: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_name = "DIR")]
    pub runs: PathBuf,
}

/// Executes `cli`, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Describe(a) => describe(a, out),
        Command::PretrainLm(a) => pretrain(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Report(a) => report(a, out),
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(a.config.as_deref(), &a.overrides)?;
    let ds = load_dataset(&a.source, &a.shape, cfg.seed)?;
    let corpus = TextCorpus::from_fixture(&load_fixture(a.fixture.as_deref())?)?;
    let (lm, lm_trace) = match &a.lm {
        Some(p) => load_language_model(p, &corpus)?,
        None => pretrain_language_model(&corpus, &cfg)?,
    };
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join(CONFIG_FILE), cfg.to_toml())?;
    writeln!(
        out,
        "training on {} items, {} classes, {} folds",
        ds.len(),
        ds.classes(),
        cfg.max_folds.unwrap_or(cfg.folds).min(cfg.folds)
    )?;
    let outcome = train_with_language_model(&ds, &cfg, &corpus, &lm, lm_trace, |_, _| {})?;
    write_run(&outcome, &a.out)?;
    for f in &outcome.folds {
        let ck = &f.checkpoint;
        let val = ck
            .history
            .iter()
            .find(|r| r.epoch == ck.epoch && r.split == "val" && r.metric == "top1")
            .map_or(f64::NAN, |r| r.value);
        writeln!(
            out,
            "fold {}: {} epochs, best epoch {} (val top1 {val:.3}) -> {}",
            f.fold_index,
            f.epochs_run,
            ck.epoch,
            a.out.join(fold_checkpoint_name(f.fold_index)).display()
        )?;
    }
    Ok(())
}

/// Writes metrics, traces and per-fold checkpoints of `outcome` into `dir`.
pub fn write_run(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    write_metrics_csv(&outcome.history(), &dir.join(METRICS_FILE))?;
    let mut trace = String::from("fold,step,loss\n");
    for f in &outcome.folds {
        save_checkpoint(&f.checkpoint, &dir.join(fold_checkpoint_name(f.fold_index)))?;
        for (i, l) in f.loss_trace.iter().enumerate() {
            let _ = writeln!(trace, "{},{},{l}", f.fold_index, i + 1);
        }
    }
    std::fs::write(dir.join(LOSS_TRACE_FILE), trace)?;
    std::fs::write(dir.join(LM_TRACE_FILE), lm_trace_csv(&outcome.lm_trace))?;
    Ok(())
}

fn lm_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

pub fn format_metrics(m: &Metrics, categories: &[String]) -> String {
    let mut s = String::new();
    for (n, v) in &m.top_n {
        let _ = writeln!(s, "top{n}: {v:.4}");
    }
    let _ = writeln!(
        s,
        "macro precision {:.4} recall {:.4} f1 {:.4}",
        m.macro_precision, m.macro_recall, m.macro_f1
    );
    for (c, pc) in categories.iter().zip(&m.per_class) {
        let _ = writeln!(
            s,
            "  {c}: precision {:.4} recall {:.4} f1 {:.4} support {}{}",
            pc.precision,
            pc.recall,
            pc.f1,
            pc.support,
            if pc.degenerate { " (degenerate)" } else { "" }
        );
    }
    for note in &m.notes {
        let _ = writeln!(s, "note: {note}");
    }
    s
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck: Checkpoint<f32> = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.source, &a.shape, ck.model.cfg.seed)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let m = evaluate_model(&ck.model, &ds, &all)?;
    writeln!(out, "{} items, checkpoint epoch {}", ds.len(), ck.epoch)?;
    write!(out, "{}", format_metrics(&m, &ck.model.categories))?;
    if let Some(p) = &a.out {
        let mut rows = Vec::new();
        for (n, v) in &m.top_n {
            rows.push(MetricRow::new(0, ck.epoch, "eval", &format!("top{n}"), *v));
        }
        for (k, v) in [("macro_precision", m.macro_precision), ("macro_recall", m.macro_recall), ("macro_f1", m.macro_f1)] {
            rows.push(MetricRow::new(0, ck.epoch, "eval", k, v));
        }
        write_metrics_csv(&rows, p)?;
    }
    Ok(())
}

fn describe(a: DescribeArgs, out: &mut dyn Write) -> Result<()> {
    let suite = render_cot_prompts(&a.category)?;
    let docs = match (a.mode, &a.fixture) {
        (ClientMode::Replay, None) => replay_documents(&suite, &Fixture::bundled())?,
        (mode, Some(p)) => fetch_description(&suite, mode, p)?,
        (ClientMode::Live, None) => {
            return Err(Error::InvalidArgument("live mode needs --fixture to record into".into()))
        }
    };
    for (i, (p, d)) in suite.prompts.iter().zip(&docs).enumerate() {
        writeln!(out, "## [{}] {p}\n{d}\n", i + 1)?;
    }
    Ok(())
}

fn pretrain(a: PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(a.config.as_deref(), &a.overrides)?;
    let corpus = TextCorpus::from_fixture(&load_fixture(a.fixture.as_deref())?)?;
    let (lm, trace) = pretrain_language_model(&corpus, &cfg)?;
    save_language_model(&lm, &corpus, &trace, &a.out)?;
    writeln!(out, "vocabulary {} tokens, d = {}", corpus.vocab_size(), lm.cfg.d)?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "epoch {}: masked-LM loss {l:.4}", i + 1)?;
    }
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let modules: Vec<&str> = match &a.module {
        Some(m) => vec![m.as_str()],
        None => GRADCHECK_MODULES.to_vec(),
    };
    let mut failed = Vec::new();
    for m in modules {
        let r = gradcheck_module(m, a.seed)?;
        writeln!(
            out,
            "{:<12} {} worst rel. error {:.2e} at {} ({} tensors, {} elements)",
            r.module,
            if r.passed() { "PASS" } else { "FAIL" },
            r.worst,
            r.param,
            r.tensors,
            r.elements
        )?;
        if !r.passed() {
            failed.push(r.module);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradientCheckFailed(format!(
            "relative error at or above {GRADCHECK_TOLERANCE:e} in {failed:?}"
        )))
    }
}

fn report(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let files = build_report(&a.runs)?;
    writeln!(out, "{}", files.summary.display())?;
    for p in files.plots {
        writeln!(out, "{}", p.display())?;
    }
    Ok(())
}
