//! Compute-optimal envelopes and power-law fits `y = C·x^α`.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robust_train::RunRecord;

/// Default number of FLOP bins for the envelope.
pub const DEFAULT_BINS: usize = 19;

/// A run outcome that can be placed on a FLOP axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CleanAcc,
    RobustAccEarlystop,
    RobustAccFinal,
    Kwh,
    Usd,
    Co2G,
    WallSeconds,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::CleanAcc,
        Metric::RobustAccEarlystop,
        Metric::RobustAccFinal,
        Metric::Kwh,
        Metric::Usd,
        Metric::Co2G,
        Metric::WallSeconds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::CleanAcc => "clean_acc",
            Metric::RobustAccEarlystop => "robust_acc_earlystop",
            Metric::RobustAccFinal => "robust_acc_final",
            Metric::Kwh => "kwh",
            Metric::Usd => "usd",
            Metric::Co2G => "co2_g",
            Metric::WallSeconds => "wall_seconds",
        }
    }

    /// Value for a run. Accuracies are reported in percent.
    pub fn value(self, r: &RunRecord) -> f64 {
        match self {
            Metric::CleanAcc => 100.0 * r.clean_acc,
            Metric::RobustAccEarlystop => 100.0 * r.robust_acc_earlystop,
            Metric::RobustAccFinal => 100.0 * r.robust_acc_final,
            Metric::Kwh => r.kwh,
            Metric::Usd => r.usd,
            Metric::Co2G => r.co2_g,
            Metric::WallSeconds => r.wall_seconds,
        }
    }

    /// Accuracies are maximized, costs minimized.
    pub fn default_direction(self) -> Direction {
        match self {
            Metric::CleanAcc | Metric::RobustAccEarlystop | Metric::RobustAccFinal => Direction::Max,
            _ => Direction::Min,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::config(format!("unknown metric `{s}`")))
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Max,
    Min,
}

/// Axis on which bins are equal width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    #[default]
    Log10,
    Linear,
}

/// A candidate for the envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPoint {
    pub flops: f64,
    pub value: f64,
    pub run_id: String,
}

impl RunPoint {
    pub fn from_record(r: &RunRecord, metric: Metric) -> RunPoint {
        RunPoint { flops: r.train_flops, value: metric.value(r), run_id: r.run_id.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub bin: usize,
    pub flops: f64,
    pub metric: f64,
    pub run_id: String,
}

/// Bin index of `x` among `bins` equal-width bins over `[lo, hi]`; the top
/// edge belongs to the last bin.
fn bin_of(x: f64, lo: f64, hi: f64, bins: usize, binning: Binning) -> usize {
    let (x, lo, hi) = match binning {
        Binning::Log10 => (x.log10(), lo.log10(), hi.log10()),
        Binning::Linear => (x, lo, hi),
    };
    let t = (x - lo) / (hi - lo) * bins as f64;
    (t.floor().max(0.0) as usize).min(bins - 1)
}

/// `Less` when `a` is the better envelope candidate.
fn rank(a: &RunPoint, b: &RunPoint, direction: Direction) -> Ordering {
    let by_value = match direction {
        Direction::Max => b.value.total_cmp(&a.value),
        Direction::Min => a.value.total_cmp(&b.value),
    };
    by_value.then(a.flops.total_cmp(&b.flops)).then_with(|| a.run_id.cmp(&b.run_id))
}

/// Best point in every nonempty FLOP bin, ordered by bin.
pub fn envelope_points(
    points: &[RunPoint],
    bins: usize,
    direction: Direction,
    binning: Binning,
) -> Result<Vec<EnvelopePoint>> {
    const OP: &str = "envelope";
    if bins == 0 {
        return Err(Error::domain(OP, "need at least one bin"));
    }
    if let Some(p) = points.iter().find(|p| !(p.flops > 0.0 && p.flops.is_finite()) || !p.value.is_finite()) {
        return Err(Error::domain(OP, format!("run {} has flops {} and metric {}", p.run_id, p.flops, p.value)));
    }
    let lo = points.iter().map(|p| p.flops).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.flops).fold(f64::NEG_INFINITY, f64::max);
    if points.len() < 2 || lo == hi {
        return Err(Error::domain(OP, "need at least two runs with distinct FLOPs"));
    }
    let mut best: Vec<Option<&RunPoint>> = vec![None; bins];
    for p in points {
        let slot = &mut best[bin_of(p.flops, lo, hi, bins, binning)];
        if slot.is_none_or(|cur| rank(p, cur, direction) == Ordering::Less) {
            *slot = Some(p);
        }
    }
    Ok(best
        .into_iter()
        .enumerate()
        .filter_map(|(bin, p)| {
            p.map(|p| EnvelopePoint { bin, flops: p.flops, metric: p.value, run_id: p.run_id.clone() })
        })
        .collect())
}

/// Envelope of the successful runs in `runs`.
pub fn envelope(
    runs: &[RunRecord],
    metric: Metric,
    bins: usize,
    direction: Direction,
    binning: Binning,
) -> Result<Vec<EnvelopePoint>> {
    let points: Vec<RunPoint> = runs.iter().filter(|r| !r.failed).map(|r| RunPoint::from_record(r, metric)).collect();
    envelope_points(&points, bins, direction, binning)
}

/// `y = C·x^α` fitted by least squares on `(log10 x, log10 y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    #[serde(rename = "C")]
    pub c: f64,
    pub alpha: f64,
    /// Coefficient of determination in log space.
    pub r2: f64,
    pub n_points: usize,
    pub x_min: f64,
    pub x_max: f64,
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    const OP: &str = "fit_power_law";
    let bad: Vec<String> = points
        .iter()
        .enumerate()
        .filter(|(_, (x, y))| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite()))
        .map(|(i, (x, y))| format!("#{i} ({x}, {y})"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::domain(OP, format!("points must be positive and finite: {}", bad.join(", "))));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.log10()).collect();
    let n = points.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if points.len() < 2 || sxx == 0.0 {
        return Err(Error::domain(OP, "need at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - alpha * x).powi(2)).sum();
    // A flat line is fitted exactly.
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PowerLawFit {
        c: 10f64.powf(intercept),
        alpha,
        r2,
        n_points: points.len(),
        x_min: points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        x_max: points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Query {
    /// Metric at a FLOP budget.
    Metric { flops: f64 },
    /// FLOP budget reaching a metric value.
    Flops { metric: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub value: f64,
    /// The FLOP coordinate lies outside the fitted range.
    pub extrapolated: bool,
}

impl PowerLawFit {
    pub fn predict(&self, flops: f64) -> f64 {
        self.c * flops.powf(self.alpha)
    }

    fn in_range(&self, x: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x)
    }

    pub fn extrapolate(&self, query: Query) -> Result<Extrapolation> {
        const OP: &str = "extrapolate";
        match query {
            Query::Metric { flops } => {
                if !(flops > 0.0 && flops.is_finite()) {
                    return Err(Error::domain(OP, format!("FLOPs must be positive, got {flops}")));
                }
                Ok(Extrapolation { value: self.predict(flops), extrapolated: !self.in_range(flops) })
            }
            Query::Flops { metric } => {
                if !(metric > 0.0 && metric.is_finite()) {
                    return Err(Error::domain(OP, format!("target metric must be positive, got {metric}")));
                }
                if self.alpha == 0.0 {
                    return Err(Error::domain(OP, "alpha is 0: the metric does not depend on compute"));
                }
                let flops = (metric / self.c).powf(1.0 / self.alpha);
                Ok(Extrapolation { value: flops, extrapolated: !self.in_range(flops) })
            }
        }
    }
}

/// A fit as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub metric: Metric,
    #[serde(rename = "C")]
    pub c: f64,
    pub alpha: f64,
    pub r2: f64,
    pub n_points: usize,
    pub bins: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl FitReport {
    pub fn new(metric: Metric, bins: usize, fit: &PowerLawFit) -> FitReport {
        FitReport {
            metric,
            c: fit.c,
            alpha: fit.alpha,
            r2: fit.r2,
            n_points: fit.n_points,
            bins,
            x_min: fit.x_min,
            x_max: fit.x_max,
        }
    }

    pub fn fit(&self) -> PowerLawFit {
        PowerLawFit {
            c: self.c,
            alpha: self.alpha,
            r2: self.r2,
            n_points: self.n_points,
            x_min: self.x_min,
            x_max: self.x_max,
        }
    }
}

/// Options for [`fit_runs`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub metric: Metric,
    pub bins: usize,
    pub direction: Direction,
    pub binning: Binning,
    /// Fit every successful run instead of the envelope only.
    pub all_runs: bool,
}

impl FitOptions {
    pub fn new(metric: Metric) -> FitOptions {
        FitOptions {
            metric,
            bins: DEFAULT_BINS,
            direction: metric.default_direction(),
            binning: Binning::Log10,
            all_runs: false,
        }
    }
}

/// Envelope and power-law fit of a run collection.
pub fn fit_runs(runs: &[RunRecord], opts: &FitOptions) -> Result<(Vec<EnvelopePoint>, FitReport)> {
    let env = envelope(runs, opts.metric, opts.bins, opts.direction, opts.binning)?;
    let points: Vec<(f64, f64)> = if opts.all_runs {
        runs.iter().filter(|r| !r.failed).map(|r| (r.train_flops, opts.metric.value(r))).collect()
    } else {
        env.iter().map(|p| (p.flops, p.metric)).collect()
    };
    let fit = fit_power_law(&points)?;
    Ok((env, FitReport::new(opts.metric, opts.bins, &fit)))
}

/// Envelope as CSV with header `flops,metric,run_id`.
pub fn write_envelope_csv<W: Write>(out: W, points: &[EnvelopePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["flops", "metric", "run_id"])?;
    for p in points {
        w.write_record([p.flops.to_string(), p.metric.to_string(), p.run_id.clone()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_both_edges() {
        assert_eq!(bin_of(1.0, 1.0, 1e19, 19, Binning::Log10), 0);
        assert_eq!(bin_of(1e19, 1.0, 1e19, 19, Binning::Log10), 18);
        assert_eq!(bin_of(50.0, 0.0, 100.0, 4, Binning::Linear), 2);
    }
}
