//! The `mipic` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::{ModelConfig, RunConfig};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalInputs};
use crate::gradcheck::{gradcheck, GradcheckOptions};
use crate::manifest::{sha256_file, RunManifest};
use crate::report::{build_report, EVAL_REPORT_FILE, RUN_CONFIG_FILE};
use crate::similarity::cka_linear;
use crate::synth::write_suite;
use crate::tensor::Matrix;
use crate::trainer::{load_corpus, train, FINAL_CHECKPOINT, TRACE_FILE};

pub const LOG_ENV: &str = "MIPIC_LOG";
pub const VOCAB_FILE: &str = "vocab.txt";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mipic", version, about = "Nested-prefix sentence embeddings: train, evaluate and check")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder on a one-sentence-per-line corpus.
    Train(TrainArgs),
    /// Score a checkpoint on STS, pair and classification files at each prefix width.
    Evaluate(EvalArgs),
    /// Compare analytic gradients of every loss term with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the linear CKA between two numeric matrix files.
    Cka(CkaArgs),
    /// Write the synthetic paraphrase corpus and its evaluation files.
    Synth(SynthArgs),
    /// Merge evaluated runs into one per-dimension comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with `model` and `train` sections.
    #[arg(long)]
    pub config: PathBuf,
    /// Training corpus; overrides `train.corpus` from the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Drop the intra-relational alignment term.
    #[arg(long)]
    pub no_sia: bool,
    /// Drop the information chaining term.
    #[arg(long)]
    pub no_pic: bool,
    /// Train on the nested contrastive loss alone.
    #[arg(long)]
    pub mrl_only: bool,
    /// Seed for initialization, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "mipic-run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `sent1<TAB>sent2<TAB>score` file.
    #[arg(long)]
    pub sts: Option<PathBuf>,
    /// `sent1<TAB>sent2<TAB>0|1` file.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// `sentence<TAB>label` file.
    #[arg(long)]
    pub classification: Option<PathBuf>,
    /// Prefix widths to score (default: every nested width of the model).
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Recorded in the report.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: `eval` beside the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write `plot.tsv` with (dim, metric) series.
    #[arg(long)]
    pub plot_data: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model config (bare, or the `model` section of a run config); the tiny preset by default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Report the plain central difference instead of the refined one.
    #[arg(long)]
    pub no_richardson: bool,
    /// Write `gradcheck.json` and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CkaArgs {
    /// Matrix file: one row per line, values separated by whitespace or commas.
    pub x: PathBuf,
    /// Matrix file with the same number of rows.
    pub y: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (each with a manifest and an eval report, or an `eval/` subdirectory).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, argv: Vec<String>) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(a, argv),
        Command::Evaluate(a) => cmd_evaluate(a, argv),
        Command::Gradcheck(a) => cmd_gradcheck(a, argv),
        Command::Cka(a) => cmd_cka(a),
        Command::Synth(a) => cmd_synth(a, argv),
        Command::Report(a) => cmd_report(a, argv),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: TrainArgs, argv: Vec<String>) -> Result<i32> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.train.no_sia |= a.no_sia;
    cfg.train.no_pic |= a.no_pic;
    cfg.train.mrl_only |= a.mrl_only;
    if let Some(c) = a.corpus {
        cfg.train.corpus = Some(c);
    }
    let corpus_path = cfg
        .train
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("no corpus: pass --corpus or set train.corpus".into()))?;
    let corpus = load_corpus(&corpus_path, None, cfg.model.max_len)?;
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = corpus.vocab.len();
    } else if cfg.model.vocab_size != corpus.vocab.len() {
        return Err(Error::Config(format!(
            "model.vocab_size is {} but the corpus has {} vocabulary entries (use 0 to take it from the corpus)",
            cfg.model.vocab_size,
            corpus.vocab.len()
        )));
    }
    let mut model = Model::new(cfg.model.clone())?;
    create_dir(&a.out)?;
    log::info!(
        "{} parameters ({} backbone)",
        model.parameter_count(),
        model.backbone_parameter_count()
    );
    let summary = train(&mut model, &corpus, &cfg.train, Some(&a.out))?;

    let config_path = a.out.join(RUN_CONFIG_FILE);
    write_file(&config_path, &serde_json::to_string_pretty(&cfg)?)?;
    let vocab_path = a.out.join(VOCAB_FILE);
    corpus.vocab.save(&vocab_path)?;

    let mut manifest = RunManifest::new("train", argv, serde_json::to_value(&cfg)?, Some(cfg.train.seed));
    manifest.input(&a.config)?;
    manifest.input(&corpus_path)?;
    for p in [config_path, vocab_path, a.out.join(TRACE_FILE)] {
        manifest.output(&p)?;
    }
    for p in &summary.checkpoints {
        manifest.output(p)?;
    }
    manifest.write(&a.out, started.elapsed())?;
    let last = summary.trace.last().map_or(f64::NAN, |r| r.loss.total);
    println!(
        "trained {} steps ({}), final loss {last:.4}, {:.1} ms/step -> {}",
        summary.steps,
        cfg.train.ablation().label(),
        summary.seconds_per_step * 1e3,
        a.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(EXIT_OK)
}

fn cmd_evaluate(a: EvalArgs, argv: Vec<String>) -> Result<i32> {
    let started = Instant::now();
    let loaded = load_checkpoint(&a.checkpoint)?;
    let dims = if a.dims.is_empty() {
        loaded.model.config.nested_dims.clone()
    } else {
        a.dims.clone()
    };
    let inputs = EvalInputs {
        sts: a.sts.clone(),
        pairs: a.pairs.clone(),
        classification: a.classification.clone(),
    };
    let digest = sha256_file(&a.checkpoint)?;
    let report = evaluate(&loaded.model, &loaded.vocab, &inputs, &dims, &digest, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("eval"), |p| p.join("eval"))
    });
    create_dir(&out)?;
    let json_path = out.join(EVAL_REPORT_FILE);
    write_file(&json_path, &serde_json::to_string_pretty(&report)?)?;
    let csv_path = out.join("eval_report.csv");
    write_file(&csv_path, &report.to_csv())?;
    let mut outputs = vec![json_path, csv_path];
    if a.plot_data {
        let plot = out.join("plot.tsv");
        write_file(&plot, &report.plot_data())?;
        outputs.push(plot);
    }

    let configs = serde_json::json!({ "model": loaded.model.config, "dims": dims });
    let mut manifest = RunManifest::new("evaluate", argv, configs, Some(a.seed));
    manifest.input(&a.checkpoint)?;
    for p in [&a.sts, &a.pairs, &a.classification].into_iter().flatten() {
        manifest.input(p)?;
    }
    for p in &outputs {
        manifest.output(p)?;
    }
    manifest.write(&out, started.elapsed())?;
    print!("{}", report.to_csv());
    Ok(EXIT_OK)
}

fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(run) = serde_json::from_str::<RunConfig>(&text) {
        return Ok(run.model);
    }
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_gradcheck(a: GradcheckArgs, argv: Vec<String>) -> Result<i32> {
    let started = Instant::now();
    let cfg = match &a.config {
        Some(p) => load_model_config(p)?,
        None => ModelConfig::tiny(),
    };
    let opts = GradcheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        richardson: !a.no_richardson,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&cfg, a.seed, &opts)?;
    println!("{} parameters, step {:e}, tolerance {:e}", report.param_count, report.step, report.tolerance);
    for t in &report.terms {
        println!(
            "{:<8} {} worst relative error {:.3e} at {}",
            t.term,
            if t.passed { "pass" } else { "FAIL" },
            t.worst_rel_err,
            t.worst_param
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("gradcheck.json");
        write_file(&path, &serde_json::to_string_pretty(&report)?)?;
        let mut manifest = RunManifest::new("gradcheck", argv, serde_json::to_value(&cfg)?, Some(a.seed));
        if let Some(p) = &a.config {
            manifest.input(p)?;
        }
        manifest.output(&path)?;
        manifest.write(out, started.elapsed())?;
    }
    match report.failure() {
        None => Ok(EXIT_OK),
        Some(msg) => {
            eprintln!("gradcheck failed: {msg}");
            Ok(EXIT_NUMERICAL)
        }
    }
}

/// Reads a numeric matrix: one row per line, fields split on whitespace
/// and/or commas, `#` comments and blank lines ignored.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("{f:?} is not a finite number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("row has {} values, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Input(format!("{}: no matrix rows", path.display())));
    }
    Ok(Matrix::from_rows(&rows))
}

fn cmd_cka(a: CkaArgs) -> Result<i32> {
    let x = read_matrix(&a.x)?;
    let y = read_matrix(&a.y)?;
    let cka = cka_linear(&x, &y)?;
    if cka.degenerate {
        return Err(Error::Degenerate("a centered input is zero, CKA is undefined".into()));
    }
    println!("{}", cka.value);
    Ok(EXIT_OK)
}

fn cmd_synth(a: SynthArgs, argv: Vec<String>) -> Result<i32> {
    let started = Instant::now();
    let files = write_suite(a.seed, &a.out)?;
    let mut manifest = RunManifest::new("synth", argv, serde_json::json!({ "seed": a.seed }), Some(a.seed));
    for p in files.all() {
        manifest.output(p)?;
    }
    manifest.write(&a.out, started.elapsed())?;
    println!("wrote synthetic suite to {}", a.out.display());
    Ok(EXIT_OK)
}

fn cmd_report(a: ReportArgs, argv: Vec<String>) -> Result<i32> {
    let started = Instant::now();
    let table = build_report(&a.runs)?;
    create_dir(&a.out)?;
    let csv = a.out.join("report.csv");
    write_file(&csv, &table.to_csv())?;
    let json = a.out.join("report.json");
    write_file(&json, &serde_json::to_string_pretty(&table)?)?;
    let mut manifest = RunManifest::new("report", argv, serde_json::Value::Null, None);
    for r in &table.runs {
        manifest.input(&r.dir.join(crate::manifest::MANIFEST_FILE))?;
    }
    manifest.output(&csv)?;
    manifest.output(&json)?;
    manifest.write(&a.out, started.elapsed())?;
    print!("{}", table.to_text());
    Ok(EXIT_OK)
}
