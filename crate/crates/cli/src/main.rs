//! `deepbroadcast`: fetch data, train, evaluate, compare and plot.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on a configuration error.

mod fetch;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepbroadcast::checkpoint::Checkpoint;
use deepbroadcast::config::{expand_preset, ExperimentConfig};
use deepbroadcast::data::{load_cifar10, Dataset};
use deepbroadcast::eval::{compare_variants, emit_plots, narrow_grid, parse_grid, EvalConfig, Metric, SweepResult};
use deepbroadcast::experiment::{self, run_experiment, train_variant, Event, COMPARISON_FILE, EXPERIMENT_FILE};
use deepbroadcast::net::Variant;
use deepbroadcast::selftest::{self, Check};
use deepbroadcast::trainer::{fit, RunDir, Trainer, LATEST_CHECKPOINT};
use deepbroadcast::{Error, Result};

const DATA_ENV: &str = "DEEPBROADCAST_DATA";
const DEFAULT_DATA_DIR: &str = "data";
/// Resolved evaluation settings written beside sweep outputs.
const EVAL_CONFIG_FILE: &str = "eval_config.toml";

#[derive(Parser, Debug)]
#[command(name = "deepbroadcast", version, about = "Task-oriented broadcast semantic communication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download and unpack the CIFAR-10 binary distribution.
    FetchData {
        /// Target directory [default: $DEEPBROADCAST_DATA or ./data]
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value = fetch::CIFAR10_URL)]
        url: String,
    },
    /// Train variants of an experiment, one run directory each.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Train only these variants (repeatable) [default: all in the config]
        #[arg(long = "variant")]
        variants: Vec<Variant>,
        /// Continue the run in this directory from its latest checkpoint.
        #[arg(long, value_name = "RUN_DIR", conflicts_with = "variants")]
        resume: Option<PathBuf>,
    },
    /// Train, sweep, compare and plot every variant of an experiment.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Print the metrics of a checkpoint at a few SNRs.
    Eval {
        #[command(flatten)]
        sweep: SweepArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Sweep a checkpoint over an SNR grid, writing CSV and charts.
    Sweep {
        #[command(flatten)]
        sweep: SweepArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory [default: <run dir>/sweep]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare sweep CSVs; the first is the reference variant.
    Compare {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Also write the markdown tables here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw accuracy and PSNR charts from sweep CSVs.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast property suites.
    Selftest {
        #[arg(long, default_value_t = 1_000_000)]
        symbols: usize,
        #[arg(long, default_value_t = 1_000_000)]
        kl_samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a preset: case1..case5.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config field, e.g. `trainer.seed=7` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => expand_preset(name)?,
            (None, None) => return Err(Error::config("--config", "pass --config <file> or --preset <name>")),
        };
        base.with_overrides(&self.sets)
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CIFAR-10 directory [default: $DEEPBROADCAST_DATA or ./data]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use a generated dataset of TRAIN:TEST images instead of CIFAR-10.
    #[arg(long, value_name = "TRAIN:TEST")]
    synthetic: Option<String>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        if let Some(spec) = &self.synthetic {
            let bad = || Error::config("--synthetic", format!("expected TRAIN:TEST image counts, got `{spec}`"));
            let (a, b) = spec.split_once(':').ok_or_else(bad)?;
            let n_train = a.trim().parse().map_err(|_| bad())?;
            let n_test = b.trim().parse().map_err(|_| bad())?;
            return Ok(Dataset::synthetic(n_train, n_test, 0));
        }
        let dir = data_dir(self.data.clone());
        load_cifar10(&dir).map_err(|e| {
            Error::Other(format!("{e}\nfetch the dataset with `deepbroadcast fetch-data --dir {}`", dir.display()))
        })
    }
}

fn data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Checkpoint file, or a run directory holding `latest.ckpt`.
    #[arg(long)]
    ckpt: PathBuf,
    /// SNR grid `lo:hi:step` in dB [default: -5:19:2]
    #[arg(long, conflicts_with = "snr", allow_hyphen_values = true)]
    grid: Option<String>,
    /// Individual SNRs in dB (repeatable); `inf` is the noiseless channel.
    #[arg(long, allow_negative_numbers = true)]
    snr: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Evaluate only the first N test images.
    #[arg(long)]
    test_limit: Option<usize>,
}

impl SweepArgs {
    fn eval_config(&self) -> Result<EvalConfig> {
        let grid = match (&self.grid, self.snr.is_empty()) {
            (Some(g), _) => parse_grid(g)?,
            (None, false) => self.snr.clone(),
            (None, true) => narrow_grid(),
        };
        let cfg = EvalConfig {
            grid,
            repeats: self.repeats,
            batch_size: self.batch_size,
            seed: self.seed,
            test_limit: self.test_limit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The checkpoint and the run directory it belongs to.
    fn checkpoint(&self) -> Result<(Checkpoint<f32>, PathBuf)> {
        let (file, run) = if self.ckpt.is_dir() {
            (self.ckpt.join(LATEST_CHECKPOINT), self.ckpt.clone())
        } else {
            let parent = self.ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
            (self.ckpt.clone(), parent)
        };
        Ok((Checkpoint::load(&file)?, run))
    }
}

fn on_event(e: Event) {
    match e {
        Event::Started { variant, run } => eprintln!("{}: training into {}", variant.label(), run.display()),
        Event::Epoch { variant, metrics } => {
            let acc: Vec<String> = metrics
                .train_accuracy
                .iter()
                .map(|a| a.map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a)))
                .collect();
            eprintln!(
                "{} epoch {}: loss {:.4}, train accuracy [{}], {:.1}s",
                variant.label(),
                metrics.epoch,
                metrics.loss,
                acc.join(", "),
                metrics.wall_time_s
            );
        }
        Event::Swept { variant, .. } => eprintln!("{}: sweep done", variant.label()),
    }
}

fn train(config: &ConfigArgs, data: &DataArgs, variants: &[Variant], resume: Option<&Path>) -> Result<()> {
    if let Some(dir) = resume {
        return resume_run(config, data, dir);
    }
    let exp = config.resolve()?;
    let selected = if variants.is_empty() { exp.variants.clone() } else { variants.to_vec() };
    let ds = data.load()?;
    fs::create_dir_all(&exp.output_dir)?;
    exp.save(&exp.output_dir.join(EXPERIMENT_FILE))?;
    for variant in selected {
        let (run, ckpt) = train_variant::<f32>(&exp, variant, &ds, on_event)?;
        println!("{}\t{}\tepoch {}", variant.as_str(), run.path.display(), ckpt.epoch);
    }
    Ok(())
}

/// Resumes from `<dir>/latest.ckpt`. Only `--set trainer.epochs` and
/// `trainer.checkpoint_every` may change; the config defaults to the one saved in the run.
fn resume_run(config: &ConfigArgs, data: &DataArgs, dir: &Path) -> Result<()> {
    let run = RunDir::open(dir)?;
    let ckpt = Checkpoint::<f32>::load(&run.latest())?;
    let saved = dir.join(EXPERIMENT_FILE);
    let exp = if config.config.is_some() || config.preset.is_some() {
        config.resolve()?
    } else if saved.is_file() {
        ExperimentConfig::load(&saved)?.with_overrides(&config.sets)?
    } else {
        return Err(Error::config("--config", format!("{} has no {EXPERIMENT_FILE}; pass --config", dir.display())));
    };
    let variant = ckpt.train.variant;
    let cfg = exp.train_config(variant)?;
    let ds = data.load()?;
    exp.save(&saved)?;
    let mut trainer = Trainer::resume(ckpt, cfg)?;
    fit(&mut trainer, &ds, Some(&run), |m| on_event(Event::Epoch { variant, metrics: m }))?;
    println!("{}\t{}\tepoch {}", variant.as_str(), run.path.display(), trainer.epoch);
    Ok(())
}

fn run(config: &ConfigArgs, data: &DataArgs) -> Result<()> {
    let exp = config.resolve()?;
    let ds = data.load()?;
    let report = run_experiment::<f32>(&exp, &ds, on_event)?;
    print!("{}", report.comparison.to_markdown());
    eprintln!("outputs in {}", exp.output_dir.display());
    Ok(())
}

fn print_records(r: &SweepResult) {
    println!("variant\tuser\ttask\tsnr_db\tmetric\tvalue\tstd");
    for x in &r.records {
        let value = match x.metric {
            Metric::Accuracy => format!("{:.4}", x.value),
            Metric::Psnr => format!("{:.2}", x.value),
        };
        println!(
            "{}\t{}\t{}\t{}\t{}\t{value}\t{:.4}",
            x.variant.as_str(),
            x.user,
            x.task,
            x.snr_db,
            x.metric.as_str(),
            x.std
        );
    }
}

fn eval(args: &SweepArgs, data: &DataArgs) -> Result<()> {
    let cfg = args.eval_config()?;
    let (ckpt, _) = args.checkpoint()?;
    let ds = data.load()?;
    print_records(&experiment::sweep_checkpoint(&ckpt, &ds.test, &cfg)?);
    Ok(())
}

fn sweep(args: &SweepArgs, data: &DataArgs, out: Option<&Path>) -> Result<()> {
    let cfg = args.eval_config()?;
    let (ckpt, run) = args.checkpoint()?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run.join("sweep"));
    let ds = data.load()?;
    let result = experiment::sweep_checkpoint(&ckpt, &ds.test, &cfg)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join(EVAL_CONFIG_FILE), toml::to_string(&cfg).expect("eval config serializes"))?;
    for path in emit_plots(&result, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn read_sweeps(paths: &[PathBuf]) -> Result<Vec<SweepResult>> {
    paths.iter().map(|p| SweepResult::read_csv(p)).collect()
}

fn compare(csv: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let table = compare_variants(&read_sweeps(csv)?)?.to_markdown();
    print!("{table}");
    if let Some(out) = out {
        let path = if out.is_dir() { out.join(COMPARISON_FILE) } else { out.to_path_buf() };
        fs::write(path, table)?;
    }
    Ok(())
}

fn plot(csv: &[PathBuf], out: &Path) -> Result<()> {
    let merged = SweepResult::merge(&read_sweeps(csv)?);
    fs::create_dir_all(out)?;
    for path in emit_plots(&merged, out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run_selftest(symbols: usize, kl_samples: usize, seed: u64) -> Result<bool> {
    let suites: [(&str, Vec<Check>); 4] = [
        ("channel statistics", selftest::channel_statistics(symbols, seed)?),
        ("KL oracle", selftest::kl_oracle(20, kl_samples, seed)?),
        ("gradients", selftest::gradient_suite(64, 1e-5)?),
        ("structural invariants", selftest::structural_invariants()?),
    ];
    let mut ok = true;
    for (name, checks) in &suites {
        let passed = selftest::all_passed(checks);
        ok &= passed;
        println!("{} {name}", if passed { "PASS" } else { "FAIL" });
        for c in checks {
            println!("    {c}");
        }
    }
    Ok(ok)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::FetchData { dir, url } => fetch::fetch(&url, &data_dir(dir)).map(|_| true),
        Command::Train {
            config,
            data,
            variants,
            resume,
        } => train(&config, &data, &variants, resume.as_deref()).map(|_| true),
        Command::Run { config, data } => run(&config, &data).map(|_| true),
        Command::Eval { sweep: args, data } => eval(&args, &data).map(|_| true),
        Command::Sweep { sweep: args, data, out } => sweep(&args, &data, out.as_deref()).map(|_| true),
        Command::Compare { csv, out } => compare(&csv, out.as_deref()).map(|_| true),
        Command::Plot { csv, out } => plot(&csv, &out).map(|_| true),
        Command::Selftest {
            symbols,
            kl_samples,
            seed,
        } => run_selftest(symbols, kl_samples, seed),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors by itself
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
