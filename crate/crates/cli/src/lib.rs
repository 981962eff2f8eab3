//! Command-line front end for spoofbench.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use spoofbench_core::archsearch::{ColorMode, DEFAULT_BUDGET};
use spoofbench_core::backprop::{TrainingSchedule, DEFAULT_MINIBATCH};
use spoofbench_core::datapipe::{generate_synthetic_benchmark, load_manifest, SynthParams};
use spoofbench_core::model::{ModelContainer, FORMAT_VERSION};
use spoofbench_core::pipeline::{self, NetTrainingConfig, SearchConfig};
use spoofbench_core::protocol::{ThresholdRule, DEFAULT_FOLDS};
use spoofbench_core::{Error, Result};

pub const WORKERS_ENV: &str = "SPOOFBENCH_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "spoofbench", version, about = "Spoofing-detection benchmark toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic real/fake benchmark.
    Synth(SynthArgs),
    /// Random architecture search with random filters and a linear SVM.
    Search(SearchArgs),
    /// Train the spoofnet filters by back-propagation.
    TrainNet(TrainNetArgs),
    /// Evaluate a model on the test split.
    Eval(EvalArgs),
    /// Dump first-layer filters, class means and mean activation maps.
    Inspect(InspectArgs),
    /// Write the classifier-input features of every sample as JSON Lines.
    Extract(ExtractArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    individuals: usize,
    /// Images per individual and class.
    #[arg(long, default_value_t = 10)]
    per_individual: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1.5)]
    blur_sigma: f64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
    #[arg(long, default_value_t = 0.5)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    dev_individuals: usize,
}

#[derive(Debug, Args, Serialize)]
struct SearchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Include per-candidate wall times in the trace.
    #[arg(long)]
    timing: bool,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    /// Fix the color mode instead of searching over it.
    #[arg(long, value_parser = parse_color)]
    color: Option<ColorMode>,
    /// Size of the candidate-evaluation pool.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct TrainNetArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// spoofnet, reference or desk.
    #[arg(long, default_value = "desk")]
    schedule: String,
    /// 128×128 input with 112×112 crops instead of 64/56.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = DEFAULT_MINIBATCH)]
    minibatch: usize,
    /// Per-epoch training log as JSON Lines.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// dev-eer, cv-eer or fixed-0.5.
    #[arg(long, default_value = "fixed-0.5")]
    threshold: String,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_color(s: &str) -> std::result::Result<ColorMode, String> {
    match s {
        "gray" => Ok(ColorMode::Gray),
        "color" => Ok(ColorMode::Color),
        _ => Err(format!("expected gray or color, got {s:?}")),
    }
}

fn workers(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?,
            Err(_) => 0,
        },
    };
    Ok(n)
}

/// Runs `f` inside a pool of `n` threads; 0 means one per core.
fn with_pool<T: Send>(n: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn report(seed: u64, command: &str, config: &impl Serialize, body: Value) -> Result<Value> {
    let mut out = json!({
        "format_version": FORMAT_VERSION,
        "command": command,
        "seed": seed,
        "config": serde_json::to_value(config)?,
    });
    if let (Value::Object(out), Value::Object(body)) = (&mut out, body) {
        for (k, v) in body {
            out.entry(k).or_insert(v);
        }
    }
    Ok(out)
}

fn emit(value: &Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    if let Some(path) = path {
        write_text(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<Value> {
    let params = SynthParams {
        individuals: args.individuals,
        per_individual: args.per_individual,
        size: args.size,
        blur_sigma: args.blur_sigma,
        noise_std: args.noise,
        contrast_jitter: args.jitter,
        test_fraction: args.test_fraction,
        dev_individuals: args.dev_individuals,
        seed: args.seed,
    };
    let manifest = generate_synthetic_benchmark(&params, &args.out)?;
    let tally = manifest.tally();
    report(
        args.seed,
        "synth",
        args,
        json!({
            "manifest": args.out.join(spoofbench_core::datapipe::MANIFEST_NAME),
            "samples": manifest.records.len(),
            "splits": tally,
        }),
    )
}

fn search(args: &SearchArgs) -> Result<Value> {
    let manifest = load_manifest(&args.manifest)?;
    let cfg = SearchConfig {
        budget: args.budget,
        seed: args.seed,
        folds: args.folds,
        color: args.color,
        ..SearchConfig::default()
    };
    let run = with_pool(workers(args.workers)?, || pipeline::run_search(&manifest, &cfg))?;
    run.model.save(&args.out)?;
    if let Some(trace) = &args.trace {
        write_text(trace, &pipeline::trace_jsonl(&run.outcome, args.timing)?)?;
    }
    let best = run.outcome.best();
    let tau = run.model.threshold.map(|t| t.tau);
    report(
        args.seed,
        "search",
        args,
        json!({
            "evaluated": run.outcome.trace.len(),
            "rejected": run.outcome.rejected.len(),
            "best_index": best.index,
            "best_objective": best.objective,
            "architecture": best.spec,
            "cv_eer_tau": tau,
        }),
    )
}

fn train_net(args: &TrainNetArgs) -> Result<Value> {
    let manifest = load_manifest(&args.manifest)?;
    let cfg = NetTrainingConfig {
        reduced: !args.full,
        schedule: TrainingSchedule::by_name(&args.schedule)?,
        seed: args.seed,
        minibatch: args.minibatch,
    };
    let run = with_pool(workers(args.workers)?, || pipeline::run_train_net(&manifest, &cfg))?;
    run.model.save(&args.out)?;
    if let Some(log) = &args.log {
        write_text(log, &pipeline::epoch_log_jsonl(&run.log)?)?;
    }
    let last = run.log.last();
    report(
        args.seed,
        "train-net",
        args,
        json!({
            "epochs": run.log.len(),
            "final_train_loss": last.map(|e| e.train_loss),
            "schedule": cfg.schedule,
        }),
    )
}

fn eval(args: &EvalArgs) -> Result<Value> {
    let rule: ThresholdRule = args.threshold.parse()?;
    let model = ModelContainer::load(&args.model)?;
    let manifest = load_manifest(&args.manifest)?;
    let rep = with_pool(workers(args.workers)?, || pipeline::evaluate(&model, &manifest, rule))?;
    report(model.seed, "eval", args, serde_json::to_value(&rep)?)
}

fn inspect(args: &InspectArgs) -> Result<Value> {
    let model = ModelContainer::load(&args.model)?;
    let manifest = load_manifest(&args.manifest)?;
    let summary = pipeline::inspect(&model, &manifest, &args.out)?;
    report(model.seed, "inspect", args, serde_json::to_value(&summary)?)
}

fn extract(args: &ExtractArgs) -> Result<Value> {
    let model = ModelContainer::load(&args.model)?;
    let manifest = load_manifest(&args.manifest)?;
    let records = with_pool(workers(args.workers)?, || pipeline::extract(&model, &manifest))?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(&args.out, &text)?;
    report(
        model.seed,
        "extract",
        args,
        json!({
            "samples": records.len(),
            "feature_len": records.first().map(|r| r.features.len()),
        }),
    )
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 success, 1 runtime failure, 2 invalid arguments.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{}", e.render());
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a).and_then(|v| emit(&v, None)),
        Command::Search(a) => search(a).and_then(|v| emit(&v, None)),
        Command::TrainNet(a) => train_net(a).and_then(|v| emit(&v, None)),
        Command::Eval(a) => eval(a).and_then(|v| emit(&v, a.report.as_deref())),
        Command::Inspect(a) => inspect(a).and_then(|v| emit(&v, None)),
        Command::Extract(a) => extract(a).and_then(|v| emit(&v, None)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
