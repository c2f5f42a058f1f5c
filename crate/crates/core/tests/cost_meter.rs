use robustlab::cost_meter::{
    energy_from_samples, energy_report, passes_per_example, probe_once, read_trace, train_flops, EnergyParams,
    FlopQuery, PowerMeter, PowerSample, PowerSource,
};
use robustlab::models::count_forward_flops;
use robustlab::{ArchSpec, Error, LossKind};
use std::io::Write;

fn cifar_query(arch: ArchSpec, loss: LossKind, steps: usize) -> FlopQuery {
    FlopQuery { arch, loss, steps, dataset_size: 50_000, batch_size: 128, extra_ratio: 0.0, epochs: 1, ema: false }
}

fn wrn28() -> ArchSpec {
    ArchSpec::wrn(28, 10, [3, 32, 32], 10)
}

#[test]
fn worked_energy_example() {
    let p = EnergyParams { n_gpus: 4, ..EnergyParams::default() };
    let r = energy_report(300.0, 10.0 * 3600.0, &p).unwrap();
    assert_eq!(r.kwh, 18.96);
    assert_eq!(r.usd, 2.2752);
    assert_eq!((r.co2_g * 100.0).round() / 100.0, 10737.05);
}

#[test]
fn one_kilowatt_hour() {
    let p = EnergyParams { pue: 1.0, ..EnergyParams::default() };
    let r = energy_report(1000.0, 3600.0, &p).unwrap();
    assert_eq!(r.kwh, 1.0);
    assert_eq!(r.usd, 0.12);
    assert_eq!(r.co2_g, 566.3);
}

#[test]
fn energy_scales_linearly_with_gpus() {
    let one = energy_report(250.0, 1234.5, &EnergyParams::default()).unwrap();
    let two = energy_report(250.0, 1234.5, &EnergyParams { n_gpus: 2, ..EnergyParams::default() }).unwrap();
    assert_eq!(two.kwh, 2.0 * one.kwh);
    assert_eq!(two.usd, 2.0 * one.usd);
    assert_eq!(two.co2_g, 2.0 * one.co2_g);
}

#[test]
fn energy_rejects_bad_inputs() {
    let p = EnergyParams::default();
    assert!(energy_report(100.0, 0.0, &p).is_err());
    assert!(energy_report(-1.0, 10.0, &p).is_err());
    assert!(energy_report(f64::NAN, 10.0, &p).is_err());
    assert!(energy_report(100.0, 10.0, &EnergyParams { pue: 0.9, ..p }).is_err());
    assert!(energy_from_samples(&[], 10.0, &EnergyParams::default()).is_err());
}

#[test]
fn adversarial_training_cost_on_wrn_28_10() {
    let r = train_flops(&cifar_query(wrn28(), LossKind::At, 10)).unwrap();
    let total = r.total_train_flops as f64;
    assert!((total / 1.73e16 - 1.0).abs() < 0.01, "{total:e}");
    assert_eq!(r.passes_per_example, 11);
    assert_eq!(r.per_example_train_flops, 3 * 11 * r.forward_flops_per_example);
}

#[test]
fn trades_to_at_ratio_at_ten_steps() {
    let at = train_flops(&cifar_query(wrn28(), LossKind::At, 10)).unwrap();
    let trades = train_flops(&cifar_query(wrn28(), LossKind::Trades, 10)).unwrap();
    let ratio = trades.total_train_flops as f64 / at.total_train_flops as f64;
    assert!((ratio - 1.08).abs() <= 0.02, "{ratio}");
}

#[test]
fn standard_training_costs_three_forward_passes() {
    for arch in [wrn28(), ArchSpec::mlp(3, 64, [1, 8, 8], 2)] {
        let r = train_flops(&cifar_query(arch.clone(), LossKind::Standard, 0)).unwrap();
        let f = count_forward_flops(&arch).unwrap().total() as u128;
        assert_eq!(r.per_example_train_flops, 3 * f);
        assert_eq!(r.total_train_flops, 3 * f * 50_000);
    }
    assert_eq!(passes_per_example(LossKind::Standard, 7), 1);
}

#[test]
fn cost_is_monotone_in_every_axis() {
    let base = cifar_query(ArchSpec::wrn(16, 2, [3, 32, 32], 10), LossKind::At, 3);
    let cost = |q: &FlopQuery| train_flops(q).unwrap().total_train_flops;
    let c0 = cost(&base);
    let bigger = [
        FlopQuery { steps: 4, ..base.clone() },
        FlopQuery { dataset_size: 60_000, ..base.clone() },
        FlopQuery { epochs: 2, ..base.clone() },
        FlopQuery { extra_ratio: 0.3, ..base.clone() },
        FlopQuery { loss: LossKind::Trades, ..base.clone() },
        FlopQuery { arch: ArchSpec::wrn(22, 2, [3, 32, 32], 10), ..base.clone() },
        FlopQuery { arch: ArchSpec::wrn(16, 4, [3, 32, 32], 10), ..base.clone() },
    ];
    for q in &bigger {
        assert!(cost(q) > c0, "{q:?}");
    }
    assert_eq!(cost(&FlopQuery { epochs: 5, ..base.clone() }), 5 * c0);
    assert_eq!(cost(&FlopQuery { loss: LossKind::Standard, steps: 0, ..base.clone() }) * 4, c0);
    let ema = train_flops(&FlopQuery { ema: true, ..base.clone() }).unwrap();
    assert!(ema.ema_flops > 0);
    assert_eq!(ema.total_train_flops, c0);
}

#[test]
fn flop_queries_are_validated() {
    assert!(train_flops(&cifar_query(wrn28(), LossKind::At, 0)).is_err());
    assert!(train_flops(&FlopQuery { epochs: 0, ..cifar_query(wrn28(), LossKind::Standard, 0) }).is_err());
    assert!(train_flops(&cifar_query(ArchSpec::wrn(27, 10, [3, 32, 32], 10), LossKind::Standard, 0)).is_err());
}

#[test]
fn power_traces_are_read_and_averaged() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "timestamp_s,watts\n0,100\n1,100\n4,300").unwrap();
    let samples = read_trace(f.path()).unwrap();
    assert_eq!(samples.len(), 3);
    let r = energy_from_samples(&samples, 4.0, &EnergyParams { pue: 1.0, ..EnergyParams::default() }).unwrap();
    assert!((r.avg_power_watts - 175.0).abs() < 1e-12);

    let meter = PowerMeter::start(&PowerSource::Trace(f.path().to_path_buf())).unwrap();
    assert_eq!(meter.stop().unwrap().0, samples);
}

#[test]
fn malformed_traces_name_the_file() {
    for body in ["timestamp_s,watts\n0,100\n0,120\n", "timestamp_s,watts\n0,abc\n", "timestamp_s,watts\n", "0,-5\n"] {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "{body}").unwrap();
        match read_trace(f.path()) {
            Err(Error::Format { path, .. }) => assert_eq!(path, f.path()),
            other => panic!("{body:?}: {other:?}"),
        }
    }
}

#[test]
fn probes_are_run_through_the_shell() {
    assert_eq!(probe_once("echo 42.5").unwrap(), 42.5);
    for bad in ["exit 3", "echo watts", "echo -1"] {
        match probe_once(bad) {
            Err(Error::Probe { command, .. }) => assert_eq!(command, bad),
            other => panic!("{bad}: {other:?}"),
        }
    }
    assert!(PowerMeter::start(&PowerSource::Probe { command: "false".into(), period_ms: 10 }).is_err());
}

#[test]
fn probe_meter_samples_until_stopped() {
    let meter = PowerMeter::start(&PowerSource::Probe { command: "echo 80".into(), period_ms: 5 }).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(60));
    let (samples, wall) = meter.stop().unwrap();
    assert!(samples.len() >= 2, "{samples:?}");
    assert!(samples.iter().all(|s| s.watts == 80.0));
    assert!(samples.windows(2).all(|w| w[0].timestamp_s < w[1].timestamp_s));
    assert!(wall > 0.0);
}

#[test]
fn constant_power_meter() {
    let (samples, _) = PowerMeter::start(&PowerSource::Constant(65.0)).unwrap().stop().unwrap();
    assert_eq!(samples, vec![PowerSample { timestamp_s: 0.0, watts: 65.0 }]);
    assert!(PowerMeter::start(&PowerSource::Constant(-1.0)).is_err());
}
