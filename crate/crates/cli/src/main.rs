use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use robustlab::attacks::{clean_accuracy, robust_accuracy};
use robustlab::config_predictor::{FeatureVector, GbrParams};
use robustlab::cost_meter::{energy_report, train_flops, EnergyParams, FlopQuery, PowerSource};
use robustlab::dataset::{gen_blobs, load_dataset, save_dataset, BlobOptions};
use robustlab::harness::{
    read_records, run_configs, run_grid, train_predictor, write_reports, GridSpec, ReportKind, ReportOptions,
};
use robustlab::models::{count_forward_flops, count_params};
use robustlab::robust_train::RunRecord;
use robustlab::scaling_laws::{fit_runs, write_envelope_csv, Binning, Direction, FitOptions, Metric, Query};
use robustlab::{ArchSpec, AttackConfig, Error, LossKind, Model, TrainConfig};

/// Sustained training throughput per GPU assumed by `cost` when no wall time
/// is given, in FLOP/s.
const DEFAULT_THROUGHPUT: f64 = 1e14;

#[derive(Parser)]
#[command(name = "robustlab", version, about = "Adversarial-training cost and robustness laboratory")]
struct Cli {
    /// Seed for data generation, training, attacks and splits.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config: a training config for `train` and `cost`, a grid spec for `grid`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic blob dataset.
    GenData(GenData),
    /// Train one configuration.
    Train(Train),
    /// Train every configuration of a grid spec, skipping completed runs.
    Grid(Grid),
    /// Clean and PGD accuracy of a saved model.
    Eval(Eval),
    /// Analytic FLOP, energy and cost estimate; trains nothing.
    Cost(Cost),
    /// Envelope and power-law fit of a records file.
    Fit(Fit),
    /// Train the recipe predictor on a records file.
    Predict(Predict),
    /// Write derived reports for a records file.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    image_size: usize,
    #[arg(long, default_value_t = 0.15)]
    noise_sigma: f64,
    /// Size of the extra pool.
    #[arg(long, default_value_t = 0)]
    extra: usize,
}

#[derive(Args)]
struct Train {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct Grid {
    #[arg(long)]
    data: PathBuf,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Architecture name of the saved model, e.g. `wrn-10-1`.
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Evaluate the first N test examples (0 = all).
    #[arg(long, default_value_t = 0)]
    subset: usize,
}

#[derive(Args)]
struct Cost {
    #[arg(long)]
    arch: Option<String>,
    /// Input shape as C,H,W.
    #[arg(long, default_value = "3,32,32", value_parser = parse_shape)]
    input_shape: [usize; 3],
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 50_000)]
    dataset_size: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fraction of each batch drawn from extra data.
    #[arg(long, default_value_t = 0.0)]
    extra_ratio: f64,
    #[arg(long)]
    ema: bool,
    /// Average draw per GPU in watts.
    #[arg(long, default_value_t = 300.0)]
    power: f64,
    #[arg(long, default_value_t = 1)]
    gpus: u32,
    /// Wall time in hours; derived from --throughput when absent.
    #[arg(long)]
    hours: Option<f64>,
    /// Sustained FLOP/s per GPU.
    #[arg(long, default_value_t = DEFAULT_THROUGHPUT)]
    throughput: f64,
    #[arg(long, default_value_t = 1.58)]
    pue: f64,
    #[arg(long, default_value_t = 0.12)]
    usd_per_kwh: f64,
    #[arg(long, default_value_t = 566.3)]
    g_co2_per_kwh: f64,
}

#[derive(Args)]
struct FitArgs {
    /// JSONL records file.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value = "robust_acc_final")]
    metric: String,
    #[arg(long, default_value_t = 19)]
    bins: usize,
    /// Equal-width bins on the linear FLOP axis instead of log10.
    #[arg(long)]
    linear_bins: bool,
    /// Fit every successful run rather than the envelope.
    #[arg(long)]
    all_runs: bool,
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
}

#[derive(Args)]
struct Fit {
    #[command(flatten)]
    fit: FitArgs,
    /// Predict the metric at this many FLOPs.
    #[arg(long)]
    at_flops: Option<f64>,
    /// FLOPs needed to reach this metric value.
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    /// Also predict robust accuracy for this training config (JSON file).
    #[arg(long)]
    query: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_enum, default_value = "all")]
    kind: KindArg,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Standard,
    At,
    Trades,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Standard => LossKind::Standard,
            LossArg::At => LossKind::At,
            LossArg::Trades => LossKind::Trades,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Max,
    Min,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    All,
    EnvelopeCsv,
    FitJson,
    PredictorJson,
    SummaryCsv,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> =
        s.split(',').map(|d| d.trim().parse().map_err(|_| format!("bad dimension `{d}`"))).collect::<Result<_, _>>()?;
    dims.try_into().map_err(|_| "expected three comma-separated dimensions".to_string())
}

/// Misuse of the command line or a config file.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

/// Finished, but some runs failed.
#[derive(Debug, thiserror::Error)]
#[error("{0} run(s) failed")]
struct RunFailures(usize);

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn with_env_power(mut cfg: TrainConfig) -> TrainConfig {
    cfg.cost.power = PowerSource::from_env_or(cfg.cost.power);
    cfg
}

fn fit_options(a: &FitArgs) -> anyhow::Result<FitOptions> {
    let metric: Metric = a.metric.parse().map_err(|e: Error| Usage(e.to_string()))?;
    let mut opts = FitOptions::new(metric);
    opts.bins = a.bins;
    opts.all_runs = a.all_runs;
    if a.linear_bins {
        opts.binning = Binning::Linear;
    }
    if let Some(d) = a.direction {
        opts.direction = match d {
            DirectionArg::Max => Direction::Max,
            DirectionArg::Min => Direction::Min,
        };
    }
    Ok(opts)
}

fn report_failures(records: &[RunRecord]) -> anyhow::Result<()> {
    match records.iter().filter(|r| r.failed).count() {
        0 => Ok(()),
        n => Err(RunFailures(n).into()),
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(a) => {
            let opts = BlobOptions {
                n: a.n,
                image_size: a.image_size,
                noise_sigma: a.noise_sigma,
                extra: a.extra,
                seed: cli.seed.unwrap_or(0),
                ..BlobOptions::default()
            };
            let ds = gen_blobs(&opts)?;
            let dir = out_dir(cli, "data");
            save_dataset(&ds, &dir)?;
            print_json(&json!({
                "out": dir,
                "train": ds.train.len(),
                "test": ds.test.len(),
                "extra": ds.extra.as_ref().map_or(0, |e| e.len()),
            }))
        }
        Command::Train(a) => {
            let data = load_dataset(&a.data)?;
            let mut cfg: TrainConfig = match &cli.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(name) = &a.arch {
                cfg.arch = ArchSpec::parse(name, data.image_shape(), data.num_classes)?;
            }
            if let Some(l) = a.loss {
                cfg.loss = l.into();
            }
            if let Some(s) = a.steps {
                cfg.attack.steps = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let cfg = with_env_power(cfg);
            let outcome = run_configs(&[cfg], &data, &out_dir(cli, "runs"), 1)?;
            print_json(&outcome.records[0])?;
            report_failures(&outcome.records)
        }
        Command::Grid(a) => {
            let Some(path) = &cli.config else {
                bail!(Usage("grid needs --config with a grid spec".into()));
            };
            let mut grid: GridSpec = read_json(path)?;
            if let Some(s) = cli.seed {
                grid.base.seed = s;
            }
            grid.base = with_env_power(grid.base);
            let data = load_dataset(&a.data)?;
            let outcome = run_grid(&grid, &data, &out_dir(cli, "runs"), a.parallelism)?;
            print_json(&json!({
                "runs": outcome.records.len(),
                "executed": outcome.executed,
                "skipped": outcome.skipped,
                "failed": outcome.failed(),
            }))?;
            report_failures(&outcome.records)
        }
        Command::Eval(a) => {
            let data = load_dataset(&a.data)?;
            let arch = ArchSpec::parse(&a.arch, data.image_shape(), data.num_classes)?;
            let model = Model::load(&arch, &a.model)?;
            let test = data.test.head(a.subset);
            let attack =
                AttackConfig { epsilon: a.epsilon, steps: a.steps, restarts: a.restarts, ..AttackConfig::default() };
            let clean = clean_accuracy(&model, &test.images, &test.labels)?;
            let robust = robust_accuracy(&model, &test.images, &test.labels, &attack, cli.seed.unwrap_or(0))?;
            print_json(&json!({ "n": test.len(), "clean_acc": clean, "robust_acc": robust, "attack": attack }))
        }
        Command::Cost(a) => {
            let mut cfg: TrainConfig = match &cli.config {
                Some(p) => read_json(p)?,
                None => TrainConfig { batch_size: 128, ..TrainConfig::default() },
            };
            if let Some(name) = &a.arch {
                cfg.arch = ArchSpec::parse(name, a.input_shape, a.classes)?;
            }
            if let Some(l) = a.loss {
                cfg.loss = l.into();
            }
            if let Some(s) = a.steps {
                cfg.attack.steps = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(b) = a.batch_size {
                cfg.batch_size = b;
            }
            let query =
                FlopQuery { extra_ratio: a.extra_ratio, ema: a.ema || cfg.ema, ..cfg.flop_query(a.dataset_size) };
            let flops = train_flops(&query)?;
            let seconds = match a.hours {
                Some(h) => h * 3600.0,
                None => flops.total_train_flops as f64 / (a.throughput * f64::from(a.gpus)),
            };
            let params =
                EnergyParams { n_gpus: a.gpus, pue: a.pue, usd_per_kwh: a.usd_per_kwh, g_co2_per_kwh: a.g_co2_per_kwh };
            let energy = energy_report(a.power, seconds, &params)?;
            // Totals can exceed u64, which serde_json::Value cannot hold.
            #[derive(serde::Serialize)]
            struct CostOutput<F, E> {
                arch: String,
                params: u64,
                forward_flops: u64,
                flops: F,
                energy: E,
            }
            print_json(&CostOutput {
                arch: cfg.arch.name(),
                params: count_params(&cfg.arch)? as u64,
                forward_flops: count_forward_flops(&cfg.arch)?.total(),
                flops,
                energy,
            })
        }
        Command::Fit(a) => {
            let records = read_records(&a.fit.records)?;
            let opts = fit_options(&a.fit)?;
            let ok: Vec<RunRecord> = records.into_iter().filter(|r| !r.failed).collect();
            let (env, report) = fit_runs(&ok, &opts)?;
            let fit = report.fit();
            let at = a.at_flops.map(|x| fit.extrapolate(Query::Metric { flops: x })).transpose()?;
            let need = a.target.map(|y| fit.extrapolate(Query::Flops { metric: y })).transpose()?;
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("fit.json"), serde_json::to_string_pretty(&report)? + "\n")?;
                write_envelope_csv(fs::File::create(dir.join("envelope.csv"))?, &env)?;
            }
            print_json(
                &json!({ "fit": report, "envelope_points": env.len(), "at_flops": at, "flops_for_target": need }),
            )
        }
        Command::Predict(a) => {
            let records = read_records(&a.records)?;
            let opts = ReportOptions {
                gbr: GbrParams { learning_rate: a.learning_rate, ..GbrParams::default() },
                train_fraction: a.train_fraction,
                split_seed: cli.seed.unwrap_or(0),
                ..ReportOptions::default()
            };
            let pred = train_predictor(&records, &opts)?;
            let query = match &a.query {
                Some(p) => {
                    let cfg: TrainConfig = read_json(p)?;
                    let features = FeatureVector {
                        n_params: count_params(&cfg.arch)?,
                        synthetic_data: cfg.extra_data,
                        activation: cfg.arch.activation,
                        loss: cfg.loss,
                        pgd_steps: cfg.attack_steps(),
                        ema: cfg.ema,
                    };
                    Some(pred.model.predict_features(&features)?)
                }
                None => None,
            };
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("predictor.json"), serde_json::to_string_pretty(&pred)? + "\n")?;
            }
            let importances: serde_json::Map<String, serde_json::Value> = pred
                .feature_names
                .iter()
                .cloned()
                .zip(pred.model.feature_importances.iter().map(|&v| json!(v)))
                .collect();
            print_json(&json!({
                "n_train": pred.n_train,
                "n_test": pred.n_test,
                "train_mse": pred.train_mse,
                "test_mse": pred.test_mse,
                "test_r2": pred.test_r2,
                "importances": importances,
                "degenerate": pred.model.degenerate,
                "query_prediction": query,
            }))
        }
        Command::Report(a) => {
            let records = read_records(&a.fit.records)?;
            let opts = ReportOptions {
                fit: fit_options(&a.fit)?,
                train_fraction: a.train_fraction,
                split_seed: cli.seed.unwrap_or(0),
                ..ReportOptions::default()
            };
            let kinds: Vec<ReportKind> = match a.kind {
                KindArg::All => ReportKind::ALL.to_vec(),
                KindArg::EnvelopeCsv => vec![ReportKind::EnvelopeCsv],
                KindArg::FitJson => vec![ReportKind::FitJson],
                KindArg::PredictorJson => vec![ReportKind::PredictorJson],
                KindArg::SummaryCsv => vec![ReportKind::SummaryCsv],
            };
            let written = write_reports(&records, &kinds, &opts, &out_dir(cli, "reports"))?;
            print_json(&written)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<Usage>() {
        return 1;
    }
    if err.is::<RunFailures>() {
        return 3;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_) | Error::InvalidArch(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
