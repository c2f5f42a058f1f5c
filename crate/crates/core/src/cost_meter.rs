//! Training cost accounting: analytic FLOPs for a whole run, and
//! electricity, dollars and CO2-equivalent from sampled power.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{count_forward_flops, count_params, ArchSpec};
use crate::robust_train::{BatchPlan, LossKind};

/// Backward pass cost relative to the forward pass.
pub const BACKWARD_MULTIPLIER: u32 = 2;
/// Environment variable naming a power-probe command.
pub const PROBE_ENV: &str = "ROBUSTLAB_POWER_PROBE";

/// Inputs of the analytic training-FLOP model.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopQuery {
    pub arch: ArchSpec,
    pub loss: LossKind,
    /// Attack steps `n`; ignored for standard training.
    pub steps: usize,
    pub dataset_size: usize,
    pub batch_size: usize,
    /// Share of each batch drawn from the extra pool (0 for none).
    pub extra_ratio: f64,
    pub epochs: usize,
    pub ema: bool,
}

/// Analytic FLOPs of one training run. Validation after each epoch and any
/// data generation are excluded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    /// `F`: forward FLOPs for one example.
    pub forward_flops_per_example: u128,
    /// Multiply-accumulate part of `F` (2 per MAC).
    pub forward_mac_flops_per_example: u128,
    pub backward_multiplier: u32,
    /// Forward+backward units per example: `1` standard, `n + 1` AT,
    /// `n + 2` TRADES.
    pub passes_per_example: u128,
    pub per_example_train_flops: u128,
    pub examples_per_epoch: u128,
    pub epochs: u128,
    pub total_train_flops: u128,
    /// MAC-only part of the total.
    pub total_mac_flops: u128,
    /// EMA updates (`2·params` per optimizer step); not part of the total.
    pub ema_flops: u128,
}

/// Forward+backward units per example for `loss` with `steps` attack steps.
pub fn passes_per_example(loss: LossKind, steps: usize) -> u128 {
    match loss {
        LossKind::Standard => 1,
        LossKind::At => steps as u128 + 1,
        LossKind::Trades => steps as u128 + 2,
    }
}

pub fn train_flops(q: &FlopQuery) -> Result<FlopReport> {
    if q.loss != LossKind::Standard && q.steps == 0 {
        return Err(Error::config("robust training needs at least one attack step"));
    }
    if q.epochs == 0 {
        return Err(Error::config("epochs must be positive"));
    }
    let fwd = count_forward_flops(&q.arch)?;
    let plan = BatchPlan::new(q.dataset_size, q.batch_size, q.extra_ratio)?;
    let f = fwd.total() as u128;
    let passes = passes_per_example(q.loss, q.steps);
    let unit = 1 + BACKWARD_MULTIPLIER as u128;
    let per_example = unit * passes * f;
    let examples = plan.examples_per_epoch() as u128;
    let epochs = q.epochs as u128;
    let ema_flops = if q.ema { 2 * count_params(&q.arch)? as u128 * plan.batches as u128 * epochs } else { 0 };
    Ok(FlopReport {
        forward_flops_per_example: f,
        forward_mac_flops_per_example: fwd.mac as u128,
        backward_multiplier: BACKWARD_MULTIPLIER,
        passes_per_example: passes,
        per_example_train_flops: per_example,
        examples_per_epoch: examples,
        epochs,
        total_train_flops: per_example * examples * epochs,
        total_mac_flops: unit * passes * fwd.mac as u128 * examples * epochs,
        ema_flops,
    })
}

/// Where power readings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerSource {
    /// A fixed draw in watts.
    Constant(f64),
    /// CSV with header `timestamp_s,watts`.
    Trace(PathBuf),
    /// A command printing one line with the current draw in watts.
    Probe { command: String, period_ms: u64 },
}

impl Default for PowerSource {
    fn default() -> Self {
        PowerSource::Constant(65.0)
    }
}

impl PowerSource {
    /// A probe named by the environment, if set; otherwise `fallback`.
    pub fn from_env_or(fallback: PowerSource) -> PowerSource {
        match std::env::var(PROBE_ENV) {
            Ok(cmd) if !cmd.trim().is_empty() => PowerSource::Probe { command: cmd, period_ms: 1000 },
            _ => fallback,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp_s: f64,
    pub watts: f64,
}

/// Check the sample stream: nonempty, finite nonnegative watts, strictly
/// increasing timestamps.
pub fn validate_samples(samples: &[PowerSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no power samples".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if !(s.watts.is_finite() && s.watts >= 0.0) {
            return Err(Error::Data(format!("power sample {i}: {} W", s.watts)));
        }
        if i > 0 && s.timestamp_s <= samples[i - 1].timestamp_s {
            return Err(Error::Data(format!("power sample {i}: timestamp {} not increasing", s.timestamp_s)));
        }
    }
    Ok(())
}

/// Time-weighted mean power (trapezoid rule). A single sample is its own
/// mean.
pub fn average_power(samples: &[PowerSample]) -> Result<f64> {
    validate_samples(samples)?;
    if samples.len() == 1 {
        return Ok(samples[0].watts);
    }
    let area: f64 =
        samples.windows(2).map(|w| 0.5 * (w[0].watts + w[1].watts) * (w[1].timestamp_s - w[0].timestamp_s)).sum();
    Ok(area / (samples[samples.len() - 1].timestamp_s - samples[0].timestamp_s))
}

/// Read a `timestamp_s,watts` CSV trace.
pub fn read_trace(path: &Path) -> Result<Vec<PowerSample>> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["timestamp_s", "watts"] {
        return Err(Error::format(path, format!("header {:?}, expected timestamp_s,watts", headers)));
    }
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let field = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::format(path, format!("row {}: bad field {i}", line + 2)))
        };
        out.push(PowerSample { timestamp_s: field(0)?, watts: field(1)? });
    }
    validate_samples(&out).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(out)
}

/// Run a probe command once and parse the watts it prints.
pub fn probe_once(command: &str) -> Result<f64> {
    let fail = |detail: String| Error::Probe { command: command.to_string(), detail };
    let out = Command::new("sh").arg("-c").arg(command).output().map_err(|e| fail(e.to_string()))?;
    if !out.status.success() {
        return Err(fail(format!("{}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().next().unwrap_or("").trim();
    match line.parse::<f64>() {
        Ok(w) if w.is_finite() && w >= 0.0 => Ok(w),
        _ => Err(fail(format!("expected one line with watts, got `{line}`"))),
    }
}

/// Collects power samples for the duration of a run.
pub struct PowerMeter {
    started: Instant,
    kind: MeterKind,
}

enum MeterKind {
    Constant(f64),
    Trace(PathBuf),
    Probe { stop: Sender<()>, worker: JoinHandle<Result<Vec<PowerSample>>> },
}

impl PowerMeter {
    /// Begin sampling. A probe is sampled once immediately, so a broken
    /// command fails here rather than at the end of a run.
    pub fn start(source: &PowerSource) -> Result<PowerMeter> {
        let started = Instant::now();
        let kind = match source {
            PowerSource::Constant(w) => {
                if !(w.is_finite() && *w >= 0.0) {
                    return Err(Error::config(format!("constant power {w} W")));
                }
                MeterKind::Constant(*w)
            }
            PowerSource::Trace(p) => {
                read_trace(p)?;
                MeterKind::Trace(p.clone())
            }
            PowerSource::Probe { command, period_ms } => {
                let first = probe_once(command)?;
                let (stop, rx) = mpsc::channel::<()>();
                let command = command.clone();
                let period = Duration::from_millis((*period_ms).max(1));
                let worker = std::thread::spawn(move || {
                    let mut samples = vec![PowerSample { timestamp_s: 0.0, watts: first }];
                    loop {
                        let done = !matches!(rx.recv_timeout(period), Err(RecvTimeoutError::Timeout));
                        let t = started.elapsed().as_secs_f64();
                        let watts = probe_once(&command)?;
                        if t > samples[samples.len() - 1].timestamp_s {
                            samples.push(PowerSample { timestamp_s: t, watts });
                        }
                        if done {
                            return Ok(samples);
                        }
                    }
                });
                MeterKind::Probe { stop, worker }
            }
        };
        Ok(PowerMeter { started, kind })
    }

    /// Stop sampling; returns the samples and the elapsed wall time.
    pub fn stop(self) -> Result<(Vec<PowerSample>, f64)> {
        let wall = self.started.elapsed().as_secs_f64();
        let samples = match self.kind {
            MeterKind::Constant(w) => vec![PowerSample { timestamp_s: 0.0, watts: w }],
            MeterKind::Trace(p) => read_trace(&p)?,
            MeterKind::Probe { stop, worker } => {
                let _ = stop.send(());
                worker
                    .join()
                    .map_err(|_| Error::Probe { command: "sampler".into(), detail: "thread panicked".into() })??
            }
        };
        Ok((samples, wall))
    }
}

/// Conversion constants from power to cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    pub n_gpus: u32,
    pub pue: f64,
    pub usd_per_kwh: f64,
    pub g_co2_per_kwh: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { n_gpus: 1, pue: 1.58, usd_per_kwh: 0.12, g_co2_per_kwh: 566.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub avg_power_watts: f64,
    pub wall_seconds: f64,
    pub n_gpus: u32,
    pub pue: f64,
    pub kwh: f64,
    pub usd: f64,
    pub co2_g: f64,
}

/// `kwh = P̄·t·g / 3.6e6 · pue`, `usd = kwh·rate`, `co2_g = kwh·intensity`.
pub fn energy_report(avg_power_watts: f64, wall_seconds: f64, p: &EnergyParams) -> Result<EnergyReport> {
    if !(wall_seconds > 0.0 && wall_seconds.is_finite()) {
        return Err(Error::config(format!("wall time {wall_seconds} s must be positive")));
    }
    if !(avg_power_watts >= 0.0 && avg_power_watts.is_finite()) {
        return Err(Error::config(format!("average power {avg_power_watts} W")));
    }
    if !(p.pue >= 1.0 && p.usd_per_kwh >= 0.0 && p.g_co2_per_kwh >= 0.0) {
        return Err(Error::config("pue must be at least 1 and rates nonnegative"));
    }
    let kwh = avg_power_watts * wall_seconds * p.n_gpus as f64 / 3.6e6 * p.pue;
    Ok(EnergyReport {
        avg_power_watts,
        wall_seconds,
        n_gpus: p.n_gpus,
        pue: p.pue,
        kwh,
        usd: kwh * p.usd_per_kwh,
        co2_g: kwh * p.g_co2_per_kwh,
    })
}

/// [`energy_report`] from a sample stream.
pub fn energy_from_samples(samples: &[PowerSample], wall_seconds: f64, p: &EnergyParams) -> Result<EnergyReport> {
    energy_report(average_power(samples)?, wall_seconds, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_mean() {
        let s = |t, w| PowerSample { timestamp_s: t, watts: w };
        assert_eq!(average_power(&[s(0.0, 100.0)]).unwrap(), 100.0);
        assert_eq!(average_power(&[s(0.0, 100.0), s(1.0, 200.0)]).unwrap(), 150.0);
        // One second at 100 W then three seconds ramping 100 → 300.
        let avg = average_power(&[s(0.0, 100.0), s(1.0, 100.0), s(4.0, 300.0)]).unwrap();
        assert!((avg - (100.0 + 600.0) / 4.0).abs() < 1e-12);
        assert!(average_power(&[]).is_err());
        assert!(average_power(&[s(1.0, 1.0), s(1.0, 2.0)]).is_err());
        assert!(average_power(&[s(0.0, -1.0)]).is_err());
    }
}
