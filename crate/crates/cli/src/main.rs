use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use unidrop::config::RunConfig;
use unidrop::data::{generate_task, sequential_batches, write_tsv, TaskKind, TaskSpec, Vocabulary};
use unidrop::model::{checkpoint, Model};
use unidrop::oracle::{verify, DropoutKind, ProbeTarget, VerifyConfig};
use unidrop::toy::{default_slot, toy_translator, PROBE_ROWS};
use unidrop::trainer::eval::{evaluate, DecodeMode};
use unidrop::trainer::experiments::{ablate, sweep, SweepAxis, ABLATION_TABLE, SWEEP_FILE};
use unidrop::trainer::{train, RunOutputs, BEST_CHECKPOINT, METRICS_FILE, TIMING_FILE, VOCAB_FILE};
use unidrop::Error;

const MANIFEST_FILE: &str = "manifest.json";
const RESOLVED_CONFIG: &str = "resolved.cfg";

#[derive(Parser)]
#[command(
    name = "unidrop",
    version,
    about = "Train and probe small dropout-regularised Transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train(RunArgs),
    /// Score a checkpoint on the dev or test split.
    Evaluate(EvalArgs),
    /// Compare a dropout's measured loss gap with its second-order prediction.
    Verify(VerifyArgs),
    /// Train every ablation variant of the configured dropout.
    Ablate(RunArgs),
    /// Train once per value of one dropout rate.
    Sweep(SweepArgs),
    /// Write a synthetic task as train/dev/test TSV files.
    GenData(GenArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated rates.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Dev,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to vocab.txt beside the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dev")]
    split: Split,
    /// 0 decodes greedily.
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    /// Write the report (with hypotheses) here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    kind: DropoutKind,
    #[arg(long, default_value_t = 0.05)]
    p: f64,
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Activation slot; defaults per kind.
    #[arg(long)]
    slot: Option<String>,
    /// Probe this model instead of the built-in toy translator. The probe
    /// batch comes from the dev split of `--config`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    smoothing: f64,
    /// Largest accepted relative mismatch; 0.15 for feature, 0.2 otherwise.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    minlen: usize,
    #[arg(long, default_value_t = 10)]
    maxlen: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    /// Every key with its resolved value; pass `resolved.cfg` back via
    /// `--config` to repeat the run.
    config: String,
    seed: u64,
    version: &'static str,
    started: String,
    finished: Option<String>,
    outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn begin(command: &str, cfg: &RunConfig, out: &Path, outputs: &[&str]) -> Result<Self, Error> {
        fs::create_dir_all(out)?;
        let m = Self {
            command: command.into(),
            config: cfg.to_text(),
            seed: cfg.train.seed,
            version: env!("CARGO_PKG_VERSION"),
            started: now(),
            finished: None,
            outputs: outputs.iter().map(|f| out.join(f)).collect(),
        };
        fs::write(out.join(RESOLVED_CONFIG), &m.config)?;
        m.write(out)?;
        Ok(m)
    }

    fn finish(mut self, out: &Path) -> Result<(), Error> {
        self.finished = Some(now());
        self.write(out)
    }

    fn write(&self, out: &Path) -> Result<(), Error> {
        fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

enum Failure {
    Usage(String),
    Runtime(String),
    Tolerance,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownKey { .. }
            | Error::BadValue { .. }
            | Error::Parse { .. }
            | Error::InvalidRate { .. }
            | Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(args: RunArgs) -> Result<(), Failure> {
    let cfg = resolve(&args.cfg)?;
    let (splits, vocab) = cfg.data.load()?;
    let model = Model::new(cfg.model_for(&vocab), cfg.train.seed)?;
    let manifest = RunManifest::begin(
        "train",
        &cfg,
        &args.out,
        &[METRICS_FILE, TIMING_FILE, BEST_CHECKPOINT, VOCAB_FILE],
    )?;
    let outputs = RunOutputs {
        dir: Some(args.out.clone()),
        progress: true,
    };
    let outcome = train(model, &splits, &vocab, &cfg.train, &outputs)?;
    println!(
        "best dev loss {:.4} at epoch {} after {} steps",
        outcome.best_dev_loss, outcome.best_epoch, outcome.steps
    );
    manifest.finish(&args.out)?;
    Ok(())
}

fn run_evaluate(args: EvalArgs) -> Result<(), Failure> {
    let cfg = resolve(&args.cfg)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let vocab_path = args.vocab.unwrap_or_else(|| args.checkpoint.with_file_name(VOCAB_FILE));
    let vocab = Vocabulary::load(&vocab_path)?;
    let (splits, _) = cfg.data.load()?;
    let corpus = match args.split {
        Split::Dev => &splits.dev,
        Split::Test => &splits.test,
    };
    let mode = match args.beam {
        0 => DecodeMode::Greedy,
        width => DecodeMode::Beam {
            width,
            length_penalty: args.length_penalty,
        },
    };
    let report = evaluate(
        &model,
        corpus,
        &vocab,
        mode,
        cfg.train.batch_size,
        cfg.train.label_smoothing,
    )?;
    println!(
        "pairs {} loss {:.4} bleu {:.2} exact {:.3} token accuracy {:.3}",
        report.pairs, report.loss, report.bleu, report.exact_match, report.token_accuracy
    );
    if let Some(path) = args.out {
        fs::write(path, serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    }
    Ok(())
}

fn run_verify(args: VerifyArgs) -> Result<(), Failure> {
    let slot = args.slot.unwrap_or_else(|| default_slot(args.kind).to_string());
    let vcfg = VerifyConfig::new(args.p, args.samples, args.seed);
    let report = match args.checkpoint {
        None => {
            let toy = toy_translator(1)?;
            let target = ProbeTarget::new(&toy.model, toy.probe_batch.clone(), &slot, args.smoothing)?;
            verify(args.kind, &target, &vcfg)?
        }
        Some(path) => {
            let cfg = match &args.config {
                Some(c) => RunConfig::load(c)?,
                None => RunConfig::default(),
            };
            let model = checkpoint::load(&path)?;
            let vocab = Vocabulary::load(&path.with_file_name(VOCAB_FILE))?;
            let (splits, _) = cfg.data.load()?;
            let rows = PROBE_ROWS.min(splits.dev.len());
            let batch = sequential_batches(&splits.dev[..rows], rows.max(1), &vocab)
                .into_iter()
                .next()
                .ok_or(Error::Empty("dev split"))?;
            let target = ProbeTarget::new(&model, batch, &slot, args.smoothing)?;
            verify(args.kind, &target, &vcfg)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    let tolerance = args.tolerance.unwrap_or(match args.kind {
        DropoutKind::Feature => 0.15,
        _ => 0.2,
    });
    let within = report.mismatch.is_some_and(|m| m <= tolerance);
    if !(report.conclusive && within) {
        eprintln!(
            "mismatch {:?} against tolerance {tolerance}{}",
            report.mismatch,
            if report.conclusive {
                ""
            } else {
                " (inconclusive: too few samples)"
            }
        );
        return Err(Failure::Tolerance);
    }
    Ok(())
}

fn run_ablate(args: RunArgs) -> Result<(), Failure> {
    let cfg = resolve(&args.cfg)?;
    let (splits, vocab) = cfg.data.load()?;
    let manifest = RunManifest::begin("ablate", &cfg, &args.out, &[ABLATION_TABLE])?;
    let rows = ablate(&cfg.model_for(&vocab), &cfg.train, &splits, &vocab, Some(&args.out))?;
    for r in &rows {
        println!(
            "{:<8} {:<18} best dev {:.4} final dev {:.4}",
            r.block, r.variant, r.best_dev_loss, r.final_dev_loss
        );
    }
    manifest.finish(&args.out)?;
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<(), Failure> {
    let cfg = resolve(&args.run.cfg)?;
    let out = &args.run.out;
    let (splits, vocab) = cfg.data.load()?;
    let manifest = RunManifest::begin(&format!("sweep {}", args.axis.as_str()), &cfg, out, &[SWEEP_FILE])?;
    let records = sweep(
        &cfg.model_for(&vocab),
        &cfg.train,
        args.axis,
        &args.values,
        &splits,
        &vocab,
        Some(out),
    )?;
    for r in &records {
        println!(
            "{} = {:<6} best dev {:.4} final dev {:.4}",
            r.axis.as_str(),
            r.value,
            r.summary.best_dev_loss,
            r.summary.final_dev_loss
        );
    }
    manifest.finish(out)?;
    Ok(())
}

fn run_gen_data(args: GenArgs) -> Result<(), Failure> {
    let spec = TaskSpec {
        vocab: args.vocab,
        min_len: args.minlen,
        max_len: args.maxlen,
        noise: args.noise,
        ..TaskSpec::new(args.task, args.pairs, args.seed)
    };
    let splits = generate_task(&spec)?;
    fs::create_dir_all(&args.out)?;
    for (name, corpus) in [
        ("train.tsv", &splits.train),
        ("dev.tsv", &splits.dev),
        ("test.tsv", &splits.test),
    ] {
        write_tsv(&args.out.join(name), corpus)?;
    }
    println!(
        "{} train, {} dev, {} test pairs in {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Verify(a) => run_verify(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::GenData(a) => run_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Tolerance) => ExitCode::from(3),
    }
}
