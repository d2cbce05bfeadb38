//! `deepcl`: train, evaluate and export compressed-learning networks on MNIST.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 training diverged.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use deepcl::container::{self, PayloadKind};
use deepcl::eval::{self, SweepEvent, REFERENCE_RATES};
use deepcl::gradcheck::{self, GradcheckConfig};
use deepcl::graph::NetKind;
use deepcl::mnist::{self, Dataset, Split};
use deepcl::model::{self, NetOptions, SensingConfig};
use deepcl::train::{self, EpochReport, Reduction, TrainConfig, TrainOptions, TrainState};
use deepcl::{Error, ModelKind, Network, Result};
use serde_json::{json, Value};

use config::{pick, FileConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "deepcl", version, about = "Compressed learning on MNIST: a trained sensing layer feeding a LeNet classifier")]
struct Cli {
    /// TOML file supplying values for flags that are not given
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for evaluation [default: 1]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download the four MNIST IDX files
    FetchData(FetchArgs),
    /// Train one network and save it
    Train(TrainArgs),
    /// Report the classification error of a saved network
    Eval(EvalArgs),
    /// Train and evaluate every (rate, kind) pair; writes CSV and JSON reports
    Sweep(SweepArgs),
    /// Write the learned sensing matrix of a proposed network
    ExportSensing(ExportArgs),
    /// Compare every backward pass against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DataArgs {
    /// MNIST directory [default: $DEEPCL_DATA_DIR, else data/mnist]
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FetchArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Base URL holding the *.gz files (http, https or file) [default: $DEEPCL_MNIST_MIRROR, else the public mirror]
    #[arg(long, value_name = "URL")]
    mirror: Option<String>,
}

#[derive(Args)]
struct TrainingArgs {
    /// Training epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,

    /// Mini-batch size [default: 64]
    #[arg(long = "batch", value_name = "SIZE")]
    batch_size: Option<usize>,

    /// SGD learning rate [default: 0.0025]
    #[arg(long = "lr", value_name = "RATE")]
    learning_rate: Option<f64>,

    /// Seed for initialization and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,

    /// Combine per-sample gradients by sum (per-sample learning rate) or mean [default: sum]
    #[arg(long)]
    reduction: Option<Reduction>,

    /// Use only the first N training images
    #[arg(long, value_name = "N")]
    train_limit: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    training: TrainingArgs,

    /// Sensing rate R = M/N in (0, 1]; required unless resuming
    #[arg(long, value_parser = parse_rate)]
    rate: Option<f64>,

    /// Network kind: proposed or baseline [default: proposed]
    #[arg(long)]
    kind: Option<ModelKind>,

    /// Drop the biases of the sensing and expansion layers (proposed only)
    #[arg(long)]
    no_sensing_bias: bool,

    /// Output model file
    #[arg(long, value_name = "FILE", default_value = "model.bin")]
    out: PathBuf,

    /// JSON-lines training log [default: <out> with extension .log.jsonl]
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,

    /// Checkpoint file, rewritten every --checkpoint-every epochs
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Epochs between checkpoints [default: 1 when --checkpoint is given]
    #[arg(long, value_name = "K")]
    checkpoint_every: Option<usize>,

    /// Continue from a checkpoint; its network and settings are reused, and
    /// --epochs, --lr, --batch and --reduction override them
    #[arg(long, value_name = "FILE", conflicts_with_all = ["rate", "kind", "no_sensing_bias"])]
    resume: Option<PathBuf>,

    /// Evaluate on the test split after every epoch
    #[arg(long)]
    eval_each_epoch: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Model or checkpoint file
    #[arg(long, value_name = "FILE")]
    model: PathBuf,

    /// Sensing matrix to attach when the model is a detached inference network
    #[arg(long, value_name = "FILE")]
    sensing: Option<PathBuf>,

    /// Split to evaluate: train or test
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,

    /// Print the result as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    training: TrainingArgs,

    /// Comma-separated sensing rates [default: 0.25,0.1,0.05,0.01]
    #[arg(long, value_delimiter = ',', value_parser = parse_rate)]
    rates: Option<Vec<f64>>,

    /// Comma-separated network kinds [default: proposed,baseline]
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<ModelKind>>,

    /// CSV report
    #[arg(long, value_name = "FILE", default_value = "sweep.csv")]
    csv: PathBuf,

    /// JSON report with configuration and reference values
    #[arg(long, value_name = "FILE", default_value = "sweep.json")]
    json: PathBuf,

    /// JSON-lines progress log
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Args)]
#[group(id = "outputs", required = true, multiple = true, args = ["out", "csv"])]
struct ExportArgs {
    /// Trained proposed model or checkpoint
    #[arg(long, value_name = "FILE")]
    model: PathBuf,

    /// Sensing-matrix container
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// CSV with M rows of N weights followed by the bias
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,

    /// Also write the detached inference network (input: M measurements)
    #[arg(long, value_name = "FILE")]
    inference: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Central-difference step
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
    eps: f64,

    /// Maximum relative error
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
    tol: f64,

    /// Seed for inputs and parameters
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Coordinates sampled per tensor in whole-network checks (0 = all)
    #[arg(long, default_value_t = 256)]
    samples: usize,

    /// Print every checked tensor
    #[arg(long)]
    verbose: bool,

    /// Corrupt the analytic gradients (checks that failures are detected)
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn parse_rate(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if r > 0.0 && r <= 1.0 {
        Ok(r)
    } else {
        Err(format!("sensing rate {r} is outside (0, 1]"))
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split '{s}' (expected train|test)")),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// JSON-lines sink; a no-op without a path.
struct JsonLog(Option<BufWriter<File>>);

impl JsonLog {
    fn create(path: Option<&Path>) -> Result<Self> {
        Ok(JsonLog(path.map(File::create).transpose()?.map(BufWriter::new)))
    }

    fn write(&mut self, record: Value) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

fn epoch_line(prefix: &str, total: usize, r: &EpochReport) {
    let test = r.test_error.map(|e| format!("  test {e:.2}%")).unwrap_or_default();
    eprintln!("{prefix}epoch {}/{total}  loss {:.4}  {:.1}s{test}", r.epoch, r.mean_loss, r.seconds);
}

fn data_dir(args: &DataArgs, file: &FileConfig) -> PathBuf {
    mnist::resolve_data_dir(args.data_dir.as_deref().or(file.data_dir.as_deref()))
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    if !mnist::is_available(dir) {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("MNIST files not found in {}; run `deepcl fetch-data --data-dir {}`", dir.display(), dir.display()),
        )));
    }
    Dataset::load(dir, split)
}

fn train_config(t: &TrainingArgs, file: &FileConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: pick(t.learning_rate, file.learning_rate, d.learning_rate),
        epochs: pick(t.epochs, file.epochs, d.epochs),
        batch_size: pick(t.batch_size, file.batch_size, d.batch_size),
        seed: pick(t.seed, file.seed, d.seed),
        checkpoint_every: file.checkpoint_every.unwrap_or(d.checkpoint_every),
        reduction: pick(t.reduction, file.reduction, d.reduction),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn limited(ds: Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(0) => Err(usage("--train-limit must be positive")),
        Some(n) => Ok(ds.take(n)),
        None => Ok(ds),
    }
}

fn load_any_network(path: &Path) -> Result<Network> {
    match container::peek_kind(path)? {
        PayloadKind::Model => container::load_network(path),
        PayloadKind::Checkpoint => Ok(train::load_checkpoint(path)?.net),
        PayloadKind::SensingMatrix => Err(usage(format!("{} holds a sensing matrix, not a network", path.display()))),
    }
}

fn cmd_fetch(args: FetchArgs, file: &FileConfig) -> Result<()> {
    let dir = data_dir(&args.data, file);
    let mirror = args
        .mirror
        .or_else(|| file.mirror.clone())
        .or_else(|| std::env::var(mnist::MIRROR_ENV).ok())
        .unwrap_or_else(|| mnist::DEFAULT_MIRROR.to_string());
    let written = mnist::fetch(&dir, &mirror)?;
    for p in &written {
        eprintln!("fetched {}", p.display());
    }
    let train = Dataset::load(&dir, Split::Train)?;
    let test = Dataset::load(&dir, Split::Test)?;
    println!("{}: {} training and {} test images", dir.display(), train.len(), test.len());
    Ok(())
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<()> {
    let dir = data_dir(&args.data, file);
    let train_set = limited(load_split(&dir, Split::Train)?, args.training.train_limit)?;
    let test_set = if mnist::is_available(&dir) { Some(Dataset::load(&dir, Split::Test)?) } else { None };

    let (mut net, state, mut cfg) = match &args.resume {
        Some(path) => {
            let ck = train::load_checkpoint(path)?;
            let t = &args.training;
            let mut cfg = ck.config;
            cfg.epochs = t.epochs.unwrap_or(cfg.epochs);
            cfg.learning_rate = t.learning_rate.unwrap_or(cfg.learning_rate);
            cfg.batch_size = t.batch_size.unwrap_or(cfg.batch_size);
            cfg.reduction = t.reduction.unwrap_or(cfg.reduction);
            cfg.validate()?;
            (ck.net, ck.state, cfg)
        }
        None => {
            let cfg = train_config(&args.training, file)?;
            let rate = args.rate.or(file.rate).ok_or_else(|| usage("--rate is required (or set `rate` in the config file)"))?;
            parse_rate(&rate.to_string()).map_err(usage)?;
            let kind = pick(args.kind, file.kind, ModelKind::Proposed);
            let sensing = SensingConfig::new(train_set.signal_len(), rate)?;
            let net = match kind {
                ModelKind::Proposed => model::build_cl_net_with(sensing, cfg.seed, NetOptions { sensing_bias: !args.no_sensing_bias })?,
                ModelKind::Baseline if args.no_sensing_bias => return Err(usage("--no-sensing-bias applies to proposed networks only")),
                ModelKind::Baseline => model::build_baseline_net(sensing, cfg.seed)?,
            };
            (net, TrainState::new(cfg.seed), cfg)
        }
    };
    cfg.checkpoint_every = match (&args.checkpoint, args.checkpoint_every.or(file.checkpoint_every)) {
        (_, Some(k)) => k,
        (Some(_), None) => 1,
        (None, None) => cfg.checkpoint_every,
    };

    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    let mut log = JsonLog::create(Some(&log_path))?;
    log.write(json!({
        "event": "config",
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "network": net.kind().name(),
        "sensing": net.kind().sensing(),
        "train": cfg,
        "data_dir": dir,
        "n_train": train_set.len(),
        "resumed_from": args.resume,
        "resumed_at_epoch": state.epoch,
        "out": args.out,
    }))?;
    eprintln!(
        "training {} network ({}) on {} images: {} epochs, batch {}, lr {}, seed {}",
        net.kind().name(),
        net.kind().sensing().map(|s| s.to_string()).unwrap_or_default(),
        train_set.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.seed
    );

    let opts = TrainOptions {
        test: if args.eval_each_epoch { test_set.as_ref() } else { None },
        checkpoint_path: args.checkpoint.clone(),
    };
    let mut log_err = None;
    let result = train::train_from(&mut net, state, &train_set, &cfg, &opts, |r| {
        epoch_line("", cfg.epochs, r);
        if let Err(e) = log.write(json!({ "event": "epoch", "report": r })) {
            log_err.get_or_insert(e);
        }
    });
    if let Some(e) = log_err {
        return Err(e);
    }
    let state = match result {
        Ok(s) => s,
        Err(e) => {
            log.write(json!({ "event": "aborted", "error": e.to_string() }))?;
            return Err(e);
        }
    };
    container::save_network(&net, &args.out)?;
    let test_error = test_set.as_ref().map(|t| eval::error_rate(&net, t)).transpose()?;
    log.write(json!({ "event": "done", "epochs": state.epoch, "steps": state.step, "test_error": test_error, "model": args.out }))?;
    match test_error {
        Some(e) => println!("saved {} ; test error {e:.2}%", args.out.display()),
        None => println!("saved {}", args.out.display()),
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, file: &FileConfig) -> Result<()> {
    let mut net = load_any_network(&args.model)?;
    if let Some(path) = &args.sensing {
        if !matches!(net.kind(), NetKind::Inference(_)) {
            return Err(usage("--sensing only applies to detached inference networks"));
        }
        net = model::attach_sensing(&container::load_sensing(path)?, &net)?;
    } else if matches!(net.kind(), NetKind::Inference(_)) {
        return Err(usage("this is a detached inference network; pass --sensing with its sensing matrix"));
    }
    let dir = data_dir(&args.data, file);
    let ds = load_split(&dir, args.split)?;
    let predictions = eval::predictions(&net, &ds)?;
    let wrong = predictions.iter().zip(&ds.labels).filter(|(&p, &l)| p != l as usize).count();
    let error = 100.0 * wrong as f64 / ds.len() as f64;
    let split = match args.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    if args.json {
        let record = json!({
            "model": args.model,
            "network": net.kind().name(),
            "sensing": net.kind().sensing(),
            "split": split,
            "n": ds.len(),
            "wrong": wrong,
            "error_percent": error,
        });
        println!("{record}");
    } else {
        println!("{split} error {error:.2}% ({wrong}/{} misclassified)", ds.len());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs, file: &FileConfig) -> Result<()> {
    let cfg = train_config(&args.training, file)?;
    let rates = args.rates.or_else(|| file.rates.clone()).unwrap_or_else(|| REFERENCE_RATES.to_vec());
    for &r in &rates {
        parse_rate(&r.to_string()).map_err(usage)?;
    }
    let kinds = args.kinds.or_else(|| file.kinds.clone()).unwrap_or_else(|| vec![ModelKind::Proposed, ModelKind::Baseline]);
    if rates.is_empty() || kinds.is_empty() {
        return Err(usage("sweep needs at least one rate and one kind"));
    }
    let dir = data_dir(&args.data, file);
    let train_set = limited(load_split(&dir, Split::Train)?, args.training.train_limit)?;
    let test_set = load_split(&dir, Split::Test)?;

    let mut log = JsonLog::create(args.log.as_deref())?;
    log.write(json!({ "event": "config", "rates": rates, "kinds": kinds, "train": cfg, "data_dir": dir, "n_train": train_set.len() }))?;
    let mut log_err = None;
    let report = eval::sweep(&rates, &kinds, &cfg, &train_set, &test_set, |e| {
        let record = match e {
            SweepEvent::Started { rate, kind, cfg: s } => {
                eprintln!("== {kind} {s}");
                json!({ "event": "start", "rate": rate, "kind": kind, "measurements": s.m })
            }
            SweepEvent::Epoch { rate, kind, report } => {
                epoch_line("   ", cfg.epochs, report);
                json!({ "event": "epoch", "rate": rate, "kind": kind, "report": report })
            }
            SweepEvent::Finished(r) => {
                eprintln!("   test error {:.2}%", r.error_percent);
                json!({ "event": "result", "record": r })
            }
        };
        if let Err(e) = log.write(record) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    report.write_csv(&args.csv)?;
    report.write_json(&args.json)?;
    print!("{}", report.to_csv_string()?);
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let net = load_any_network(&args.model)?;
    let (sm, inference) = model::detach_sensing(&net).map_err(|e| match e {
        Error::Unsupported(_) => Error::Unsupported(format!(
            "export-sensing needs a proposed network; {} is a {} network",
            args.model.display(),
            net.kind().name()
        )),
        other => other,
    })?;
    if let Some(path) = &args.out {
        container::save_sensing(&sm, path)?;
    }
    if let Some(path) = &args.csv {
        sm.write_csv(path)?;
    }
    if let Some(path) = &args.inference {
        container::save_network(&inference, path)?;
    }
    let bias = if sm.bias.is_some() { format!(" (+{} biases)", sm.m()) } else { String::new() };
    println!("sensing matrix {} x {}{bias}", sm.m(), sm.n());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let cfg = GradcheckConfig {
        eps: args.eps,
        tol: args.tol,
        seed: args.seed,
        samples_per_tensor: args.samples,
        inject_fault: args.inject_fault,
        ..GradcheckConfig::default()
    };
    if !(cfg.eps > 0.0 && cfg.tol > 0.0) {
        return Err(usage("--eps and --tol must be positive"));
    }
    let mut all_ok = true;
    for report in gradcheck::standard_suite(&cfg)? {
        let ok = report.passed(cfg.tol);
        all_ok &= ok;
        println!(
            "{:<18} max rel err {:.3e}  checked {:>5}  skipped {:>3}  {}",
            report.name,
            report.max_rel_error(),
            report.checked(),
            report.skipped(),
            if ok { "ok" } else { "FAIL" }
        );
        if args.verbose {
            for t in &report.targets {
                println!("    {:<22} {:.3e}  checked {:>4}  skipped {:>3}", t.target, t.max_rel_error, t.checked, t.skipped);
            }
        }
    }
    println!("{} (eps {:e}, tol {:e})", if all_ok { "all gradients match" } else { "gradient check FAILED" }, cfg.eps, cfg.tol);
    Ok(all_ok)
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> Result<u8> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let threads = pick(cli.threads, file.threads, 1);
    if threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    let started = Instant::now();
    match cli.command {
        Command::FetchData(a) => cmd_fetch(a, &file)?,
        Command::Train(a) => cmd_train(a, &file)?,
        Command::Eval(a) => cmd_eval(a, &file)?,
        Command::Sweep(a) => cmd_sweep(a, &file)?,
        Command::ExportSensing(a) => cmd_export(a)?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(a)? {
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
