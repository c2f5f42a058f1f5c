//! Grid expansion, the idempotent grid runner and report generation.
//!
//! Output layout of a grid directory:
//!
//! ```text
//! records.jsonl        one RunRecord per line, append-only
//! runs/<run_id>.json   the same record, written atomically per run
//! models/<run_id>.rlab the retained checkpoint
//! ```
//!
//! A run counts as complete once its file exists in `runs/`; the records file
//! is reconciled from that directory, so a crash between the two writes is
//! repaired on the next invocation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config_predictor::{fit_gbr, split_train_test, training_table, GbrModel, GbrParams, FEATURE_NAMES};
use crate::cost_meter::train_flops;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::{Activation, ArchSpec};
use crate::robust_train::{train, LossKind, RunRecord, TrainConfig, RECORD_VERSION};
use crate::scaling_laws::{fit_runs, write_envelope_csv, FitOptions};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const RUNS_DIR: &str = "runs";
pub const MODELS_DIR: &str = "models";

/// Values to sweep. Empty axes keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    /// Short architecture names such as `wrn-10-1`; input shape and class
    /// count come from the base config.
    pub arch: Vec<String>,
    pub loss: Vec<LossKind>,
    pub steps: Vec<usize>,
    pub epochs: Vec<usize>,
    pub ema: Vec<bool>,
    pub extra_data: Vec<bool>,
    pub activation: Vec<Activation>,
    pub seed: Vec<u64>,
}

/// Cartesian product of axes over a base config, minus excluded
/// combinations. An exclusion rule maps axis names to values and removes
/// every combination that matches all of them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub axes: GridAxes,
    pub exclude: Vec<BTreeMap<String, Value>>,
}

const AXES: [&str; 8] = ["arch", "loss", "steps", "epochs", "ema", "extra_data", "activation", "seed"];

fn axis_values(axes: &GridAxes, base: &TrainConfig, name: &str) -> Result<Vec<Value>> {
    fn vals<T: Serialize>(v: &[T], default: T) -> Result<Vec<Value>> {
        if v.is_empty() {
            Ok(vec![serde_json::to_value(default)?])
        } else {
            v.iter().map(|x| Ok(serde_json::to_value(x)?)).collect()
        }
    }
    match name {
        "arch" => vals(&axes.arch, base.arch.name()),
        "loss" => vals(&axes.loss, base.loss),
        "steps" => vals(&axes.steps, base.attack.steps),
        "epochs" => vals(&axes.epochs, base.epochs),
        "ema" => vals(&axes.ema, base.ema),
        "extra_data" => vals(&axes.extra_data, base.extra_data),
        "activation" => vals(&axes.activation, base.arch.activation),
        "seed" => vals(&axes.seed, base.seed),
        _ => unreachable!("axis list is fixed"),
    }
}

fn apply(base: &TrainConfig, combo: &BTreeMap<&str, Value>) -> Result<TrainConfig> {
    let mut c = base.clone();
    let get = |k: &str| combo[k].clone();
    let name: String = serde_json::from_value(get("arch"))?;
    c.arch = ArchSpec::parse(&name, base.arch.input_shape, base.arch.num_classes)?;
    c.arch.activation = serde_json::from_value(get("activation"))?;
    c.loss = serde_json::from_value(get("loss"))?;
    c.attack.steps = serde_json::from_value(get("steps"))?;
    c.epochs = serde_json::from_value(get("epochs"))?;
    c.ema = serde_json::from_value(get("ema"))?;
    c.extra_data = serde_json::from_value(get("extra_data"))?;
    c.seed = serde_json::from_value(get("seed"))?;
    Ok(c)
}

impl GridSpec {
    /// Every distinct canonical config, in product order (first axis
    /// slowest). Combinations that canonicalize to the same run are kept once.
    pub fn expand(&self) -> Result<Vec<TrainConfig>> {
        for rule in &self.exclude {
            if let Some(k) = rule.keys().find(|k| !AXES.contains(&k.as_str())) {
                return Err(Error::config(format!("exclusion rule names unknown axis `{k}`")));
            }
        }
        let values: Vec<Vec<Value>> =
            AXES.iter().map(|a| axis_values(&self.axes, &self.base, a)).collect::<Result<_>>()?;
        let mut out = Vec::new();
        let mut seen: HashMap<String, TrainConfig> = HashMap::new();
        let mut index = vec![0usize; AXES.len()];
        'product: loop {
            let combo: BTreeMap<&str, Value> =
                AXES.iter().zip(&index).zip(&values).map(|((a, &i), v)| (*a, v[i].clone())).collect();
            let excluded = self.exclude.iter().any(|rule| rule.iter().all(|(k, v)| combo[k.as_str()] == *v));
            if !excluded {
                let cfg = apply(&self.base, &combo)?.canonical();
                cfg.validate()?;
                let id = cfg.run_id();
                match seen.get(&id) {
                    Some(prev) if prev.identity() != cfg.identity() => return Err(Error::Collision(id)),
                    Some(_) => {}
                    None => {
                        seen.insert(id, cfg.clone());
                        out.push(cfg);
                    }
                }
            }
            for k in (0..AXES.len()).rev() {
                index[k] += 1;
                if index[k] < values[k].len() {
                    continue 'product;
                }
                index[k] = 0;
            }
            break;
        }
        if out.is_empty() {
            return Err(Error::config("grid is empty after exclusions"));
        }
        Ok(out)
    }
}

/// Write `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Parse a records file. A final line without a newline is the remnant of an
/// interrupted append and is skipped; any other bad line is an error.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        number += 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line.trim()) {
            Ok(r) => out.push(r),
            Err(_) if !line.ends_with('\n') => {
                log::warn!("{}: ignoring truncated final line {number}", path.display());
            }
            Err(e) => return Err(Error::format(path, format!("line {number}: {e}"))),
        }
    }
    Ok(out)
}

fn parse_record(text: &str) -> Result<RunRecord> {
    let r: RunRecord = serde_json::from_str(text)?;
    if r.v != RECORD_VERSION {
        return Err(Error::Data(format!("record version {} (expected {RECORD_VERSION})", r.v)));
    }
    Ok(r)
}

fn record_line(r: &RunRecord) -> Result<String> {
    let mut s = serde_json::to_string(r)?;
    s.push('\n');
    Ok(s)
}

/// What [`run_grid`] did.
#[derive(Clone, Debug)]
pub struct GridOutcome {
    /// One record per grid config, in expansion order.
    pub records: Vec<RunRecord>,
    /// Runs executed by this invocation.
    pub executed: usize,
    /// Runs found complete on disk and skipped.
    pub skipped: usize,
}

impl GridOutcome {
    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.failed).count()
    }
}

struct GridDir {
    records: PathBuf,
    runs: PathBuf,
    models: PathBuf,
}

impl GridDir {
    fn open(out: &Path) -> Result<GridDir> {
        let d = GridDir { records: out.join(RECORDS_FILE), runs: out.join(RUNS_DIR), models: out.join(MODELS_DIR) };
        fs::create_dir_all(&d.runs)?;
        fs::create_dir_all(&d.models)?;
        Ok(d)
    }

    fn completed(&self) -> Result<HashMap<String, RunRecord>> {
        let mut done = HashMap::new();
        for entry in fs::read_dir(&self.runs)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = fs::read_to_string(&path)?;
                let r = parse_record(&text).map_err(|e| Error::format(&path, e.to_string()))?;
                done.insert(r.run_id.clone(), r);
            }
        }
        Ok(done)
    }

    /// Append any completed run missing from the records file.
    fn reconcile(&self, done: &HashMap<String, RunRecord>) -> Result<()> {
        let listed: BTreeSet<String> = if self.records.exists() {
            read_records(&self.records)?.into_iter().map(|r| r.run_id).collect()
        } else {
            BTreeSet::new()
        };
        let mut missing: Vec<&RunRecord> = done.values().filter(|r| !listed.contains(&r.run_id)).collect();
        missing.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        // Drop the remnant of a torn append so the next line starts cleanly.
        let bytes = if self.records.exists() { fs::read(&self.records)? } else { Vec::new() };
        if !bytes.is_empty() && !bytes.ends_with(b"\n") {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            OpenOptions::new().write(true).open(&self.records)?.set_len(keep as u64)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.records)?;
        for r in missing {
            f.write_all(record_line(r)?.as_bytes())?;
        }
        f.flush()?;
        Ok(())
    }
}

fn failed_record(cfg: &TrainConfig, data: &Dataset, why: &Error) -> RunRecord {
    log::error!("run {} could not train: {why}", cfg.run_id());
    let flops = train_flops(&cfg.flop_query(data.train.len())).map(|r| r.total_train_flops as f64).unwrap_or(0.0);
    RunRecord {
        run_id: cfg.run_id(),
        v: RECORD_VERSION,
        config: cfg.clone(),
        clean_acc: 0.0,
        robust_acc_earlystop: 0.0,
        robust_acc_final: 0.0,
        train_flops: flops,
        wall_seconds: 0.0,
        kwh: 0.0,
        usd: 0.0,
        co2_g: 0.0,
        best_epoch: 0,
        epochs_trained: 0,
        seed: cfg.seed,
        failed: true,
    }
}

/// Train every config of `grid` not already complete under `out`, with at
/// most `parallelism` concurrent runs. Runs that diverge or cannot train
/// are recorded as failed and the grid continues.
pub fn run_grid(grid: &GridSpec, data: &Dataset, out: &Path, parallelism: usize) -> Result<GridOutcome> {
    run_configs(&grid.expand()?, data, out, parallelism)
}

pub fn run_configs(configs: &[TrainConfig], data: &Dataset, out: &Path, parallelism: usize) -> Result<GridOutcome> {
    let dir = GridDir::open(out)?;
    let done = dir.completed()?;
    for cfg in configs {
        if let Some(prev) = done.get(&cfg.run_id()) {
            if prev.config.identity() != cfg.identity() {
                return Err(Error::Collision(format!("{} is on disk with a different config", prev.run_id)));
            }
        }
    }
    dir.reconcile(&done)?;

    let todo: Vec<&TrainConfig> = configs.iter().filter(|c| !done.contains_key(&c.run_id())).collect();
    let appender = Mutex::new(OpenOptions::new().append(true).open(&dir.records)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let fresh: Vec<RunRecord> = pool.install(|| {
        todo.par_iter()
            .map(|cfg| -> Result<RunRecord> {
                let id = cfg.run_id();
                let record = match train(cfg, data) {
                    Ok(outcome) => {
                        let mut bytes = Vec::new();
                        outcome.model.write_to(&mut bytes)?;
                        write_atomic(&dir.models.join(format!("{id}.rlab")), &bytes)?;
                        outcome.record
                    }
                    Err(e) => failed_record(cfg, data, &e),
                };
                write_atomic(&dir.runs.join(format!("{id}.json")), serde_json::to_string(&record)?.as_bytes())?;
                let line = record_line(&record)?;
                let mut f = appender.lock().expect("records lock");
                f.write_all(line.as_bytes())?;
                f.flush()?;
                log::info!("run {id} done: robust {:.4}, failed {}", record.robust_acc_final, record.failed);
                Ok(record)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut by_id: HashMap<String, RunRecord> = done;
    let executed = fresh.len();
    for r in fresh {
        by_id.insert(r.run_id.clone(), r);
    }
    let records = configs.iter().map(|c| by_id[&c.run_id()].clone()).collect();
    Ok(GridOutcome { records, executed, skipped: configs.len() - executed })
}

/// Kinds of derived output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    EnvelopeCsv,
    FitJson,
    PredictorJson,
    SummaryCsv,
}

impl ReportKind {
    pub const ALL: [ReportKind; 4] =
        [ReportKind::EnvelopeCsv, ReportKind::FitJson, ReportKind::PredictorJson, ReportKind::SummaryCsv];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportKind::EnvelopeCsv => "envelope.csv",
            ReportKind::FitJson => "fit.json",
            ReportKind::PredictorJson => "predictor.json",
            ReportKind::SummaryCsv => "summary.csv",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub fit: FitOptions,
    pub gbr: GbrParams,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            fit: FitOptions::new(crate::scaling_laws::Metric::RobustAccFinal),
            gbr: GbrParams::default(),
            train_fraction: 0.7,
            split_seed: 0,
        }
    }
}

/// A predictor trained on a split of the records, with held-out error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub feature_names: Vec<String>,
    pub model: GbrModel,
    pub n_train: usize,
    pub n_test: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    /// Absent when the held-out targets are constant.
    pub test_r2: Option<f64>,
    pub test_predictions: Vec<TestPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestPrediction {
    pub run_id: String,
    pub target: f64,
    pub predicted: f64,
}

pub fn train_predictor(records: &[RunRecord], opts: &ReportOptions) -> Result<PredictorReport> {
    let ok = successful(records)?;
    let (train_set, test_set) = split_train_test(&ok, opts.train_fraction, opts.split_seed)?;
    let (x, y) = training_table(&train_set)?;
    let model = fit_gbr(&x, &y, &opts.gbr)?;
    let (tx, ty) = training_table(&test_set)?;
    let mut test_predictions = Vec::with_capacity(ty.len());
    for ((row, &target), r) in tx.iter().zip(&ty).zip(&test_set) {
        test_predictions.push(TestPrediction { run_id: r.run_id.clone(), target, predicted: model.predict(row)? });
    }
    let n = ty.len() as f64;
    let test_mse = test_predictions.iter().map(|p| (p.target - p.predicted).powi(2)).sum::<f64>() / n;
    let mean = ty.iter().sum::<f64>() / n;
    let ss_tot: f64 = ty.iter().map(|t| (t - mean).powi(2)).sum();
    Ok(PredictorReport {
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        train_mse: *model.train_mse.last().expect("history starts with the base error"),
        model,
        n_train: y.len(),
        n_test: ty.len(),
        test_mse,
        test_r2: (ss_tot > 0.0).then(|| 1.0 - test_mse * n / ss_tot),
        test_predictions,
    })
}

/// Successful records sorted by run id, so reports do not depend on the
/// order in which parallel runs finished.
fn successful(records: &[RunRecord]) -> Result<Vec<RunRecord>> {
    let mut ok: Vec<RunRecord> = records.iter().filter(|r| !r.failed).cloned().collect();
    if ok.is_empty() {
        return Err(Error::Data("no successful runs in the records".into()));
    }
    ok.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(ok)
}

const SUMMARY_HEADER: [&str; 15] = [
    "run_id",
    "v",
    "config",
    "clean_acc",
    "robust_acc_earlystop",
    "robust_acc_final",
    "train_flops",
    "wall_seconds",
    "kwh",
    "usd",
    "co2_g",
    "best_epoch",
    "epochs_trained",
    "seed",
    "failed",
];

fn summary_csv(records: &[RunRecord]) -> Result<String> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for r in &sorted {
        w.write_record([
            r.run_id.clone(),
            r.v.to_string(),
            serde_json::to_string(&r.config)?,
            r.clean_acc.to_string(),
            r.robust_acc_earlystop.to_string(),
            r.robust_acc_final.to_string(),
            r.train_flops.to_string(),
            r.wall_seconds.to_string(),
            r.kwh.to_string(),
            r.usd.to_string(),
            r.co2_g.to_string(),
            r.best_epoch.to_string(),
            r.epochs_trained.to_string(),
            r.seed.to_string(),
            r.failed.to_string(),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(|e| Error::Data(e.to_string()))
}

/// Contents of one report.
pub fn report(records: &[RunRecord], kind: ReportKind, opts: &ReportOptions) -> Result<String> {
    let ok = successful(records)?;
    match kind {
        ReportKind::EnvelopeCsv => {
            let (env, _) = fit_runs(&ok, &opts.fit)?;
            let mut buf = Vec::new();
            write_envelope_csv(&mut buf, &env)?;
            String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
        }
        ReportKind::FitJson => Ok(serde_json::to_string_pretty(&fit_runs(&ok, &opts.fit)?.1)? + "\n"),
        ReportKind::PredictorJson => Ok(serde_json::to_string_pretty(&train_predictor(&ok, opts)?)? + "\n"),
        ReportKind::SummaryCsv => summary_csv(records),
    }
}

/// Write the requested reports into `dir`; returns the paths written.
pub fn write_reports(
    records: &[RunRecord],
    kinds: &[ReportKind],
    opts: &ReportOptions,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for &kind in kinds {
        let path = dir.join(kind.file_name());
        write_atomic(&path, report(records, kind, opts)?.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}
