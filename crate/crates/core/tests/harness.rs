use std::collections::BTreeMap;
use std::fs;

use robustlab::dataset::{gen_blobs, BlobOptions};
use robustlab::harness::{
    read_records, report, run_grid, write_reports, GridAxes, GridSpec, ReportKind, ReportOptions, RECORDS_FILE,
};
use robustlab::robust_train::{RunRecord, TrainConfig};
use robustlab::{ArchSpec, AttackConfig, Error, LossKind, Model};

fn base() -> TrainConfig {
    TrainConfig {
        arch: ArchSpec::mlp(2, 8, [1, 8, 8], 2),
        epochs: 1,
        batch_size: 32,
        lr: 0.05,
        attack: AttackConfig { steps: 1, ..AttackConfig::default() },
        eval_attack: AttackConfig { steps: 2, ..AttackConfig::default() },
        eval_subset: 32,
        final_attack: AttackConfig { steps: 2, restarts: 1, ..AttackConfig::default() },
        final_subset: 32,
        ..TrainConfig::default()
    }
}

fn grid_2x2x2() -> GridSpec {
    GridSpec {
        base: base(),
        axes: GridAxes {
            arch: vec!["mlp-2-8".into(), "mlp-3-8".into()],
            loss: vec![LossKind::At, LossKind::Trades],
            steps: vec![1, 2],
            ..GridAxes::default()
        },
        exclude: Vec::new(),
    }
}

#[test]
fn grid_expansion_is_a_deduplicated_product() {
    let configs = grid_2x2x2().expand().unwrap();
    assert_eq!(configs.len(), 8);
    let ids: std::collections::BTreeSet<String> = configs.iter().map(|c| c.run_id()).collect();
    assert_eq!(ids.len(), 8);

    // Standard training ignores the step axis, so it appears once per arch.
    let mut g = grid_2x2x2();
    g.axes.loss.push(LossKind::Standard);
    assert_eq!(g.expand().unwrap().len(), 10);

    let mut rule = BTreeMap::new();
    rule.insert("loss".to_string(), serde_json::json!("trades"));
    rule.insert("steps".to_string(), serde_json::json!(2));
    g.exclude.push(rule);
    assert_eq!(g.expand().unwrap().len(), 8);
}

#[test]
fn grid_specs_are_validated() {
    let mut g = grid_2x2x2();
    g.axes.arch.push("wrn-11-1".into());
    assert!(matches!(g.expand(), Err(Error::InvalidArch(_))));

    let mut g = grid_2x2x2();
    g.exclude.push(BTreeMap::from([("width".to_string(), serde_json::json!(3))]));
    assert!(matches!(g.expand(), Err(Error::InvalidConfig(_))));

    let mut g = grid_2x2x2();
    g.exclude.push(BTreeMap::new());
    assert!(g.expand().is_err());

    let json = r#"{"base": {"epochs": 2}, "axes": {"loss": ["at", "trades"], "seed": [0, 1]}}"#;
    let g: GridSpec = serde_json::from_str(json).unwrap();
    assert_eq!(g.expand().unwrap().len(), 4);
    assert!(serde_json::from_str::<GridSpec>(r#"{"axes": {"depth": [1]}}"#).is_err());
}

fn data() -> robustlab::Dataset {
    gen_blobs(&BlobOptions { n: 160, ..BlobOptions::default() }).unwrap()
}

fn sorted(mut r: Vec<RunRecord>) -> Vec<RunRecord> {
    r.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    r
}

#[test]
fn grid_runs_are_persisted_and_idempotent() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    let grid = grid_2x2x2();
    let first = run_grid(&grid, &data, dir.path(), 2).unwrap();
    assert_eq!((first.records.len(), first.executed, first.skipped), (8, 8, 0));

    let on_disk = read_records(&dir.path().join(RECORDS_FILE)).unwrap();
    assert_eq!(on_disk.len(), 8);
    for r in &first.records {
        assert!(!r.failed);
        let model = Model::load(&r.config.arch, dir.path().join("models").join(format!("{}.rlab", r.run_id))).unwrap();
        assert_eq!(model.arch(), &r.config.arch);
    }

    let again = run_grid(&grid, &data, dir.path(), 2).unwrap();
    assert_eq!((again.executed, again.skipped), (0, 8));
    assert_eq!(read_records(&dir.path().join(RECORDS_FILE)).unwrap().len(), 8);
    assert_eq!(again.records, first.records);

    // Lose the records file and one run: the file is rebuilt from the run
    // directory and only the missing run is trained again.
    fs::remove_file(dir.path().join(RECORDS_FILE)).unwrap();
    let lost = &first.records[3].run_id;
    fs::remove_file(dir.path().join("runs").join(format!("{lost}.json"))).unwrap();
    let repaired = run_grid(&grid, &data, dir.path(), 1).unwrap();
    assert_eq!((repaired.executed, repaired.skipped), (1, 7));
    let lines = read_records(&dir.path().join(RECORDS_FILE)).unwrap();
    assert_eq!(lines.len(), 8);
    let ids: std::collections::BTreeSet<&str> = lines.iter().map(|r| r.run_id.as_str()).collect();
    assert_eq!(ids.len(), 8);
    assert!(repaired.records[3].same_outcome(&first.records[3]));
}

#[test]
fn parallelism_does_not_change_outcomes() {
    let data = data();
    let one = tempfile::tempdir().unwrap();
    let four = tempfile::tempdir().unwrap();
    let a = sorted(run_grid(&grid_2x2x2(), &data, one.path(), 1).unwrap().records);
    let b = sorted(run_grid(&grid_2x2x2(), &data, four.path(), 4).unwrap().records);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.same_outcome(y), "{}", x.run_id);
    }
    let fa = sorted(read_records(&one.path().join(RECORDS_FILE)).unwrap());
    let fb = sorted(read_records(&four.path().join(RECORDS_FILE)).unwrap());
    assert!(fa.iter().zip(&fb).all(|(x, y)| x.same_outcome(y)));
}

#[test]
fn failed_runs_are_recorded_and_the_grid_continues() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    let mut grid = grid_2x2x2();
    grid.axes.steps = vec![1];
    grid.axes.arch = vec!["mlp-2-8".into()];
    grid.base.lr = 1e300;
    grid.base.momentum = 0.0;
    grid.base.loss = LossKind::Standard;
    grid.axes.loss = vec![LossKind::Standard, LossKind::At];
    let out = run_grid(&grid, &data, dir.path(), 1).unwrap();
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.failed(), 2);
    assert!(out.records.iter().all(|r| r.train_flops > 0.0));
    assert!(matches!(report(&out.records, ReportKind::FitJson, &ReportOptions::default()), Err(Error::Data(_))));
}

#[test]
fn run_id_collisions_are_refused() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    let grid = grid_2x2x2();
    let out = run_grid(&grid, &data, dir.path(), 1).unwrap();
    let victim = &out.records[0];
    let mut forged = victim.clone();
    forged.config.epochs = 7;
    let path = dir.path().join("runs").join(format!("{}.json", victim.run_id));
    fs::write(&path, serde_json::to_string(&forged).unwrap()).unwrap();
    assert!(matches!(run_grid(&grid, &data, dir.path(), 1), Err(Error::Collision(_))));
}

#[test]
fn records_file_is_line_oriented_and_crash_tolerant() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    let mut grid = grid_2x2x2();
    grid.axes.arch.truncate(1);
    run_grid(&grid, &data, dir.path(), 1).unwrap();
    let path = dir.path().join(RECORDS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let keys = [
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
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut got: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut want = keys.to_vec();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert_eq!(v["v"], 1);
    }

    // A torn final append is ignored, then completed by the next run.
    fs::write(&path, format!("{text}{{\"run_id\": \"ab")).unwrap();
    assert_eq!(read_records(&path).unwrap().len(), 4);
    run_grid(&grid, &data, dir.path(), 1).unwrap();
    assert_eq!(read_records(&path).unwrap().len(), 4);

    fs::write(&path, format!("not json\n{text}")).unwrap();
    assert!(matches!(read_records(&path), Err(Error::Format { .. })));
    let old = text.lines().next().unwrap().replacen("\"v\":1", "\"v\":0", 1);
    fs::write(&path, format!("{old}\n")).unwrap();
    assert!(read_records(&path).is_err());
}

fn synthetic(n: usize) -> Vec<RunRecord> {
    (0..n)
        .map(|i| {
            let flops = 10f64.powf(9.0 + i as f64 / 4.0);
            let config = TrainConfig {
                arch: ArchSpec::mlp(2 + i % 3, 8 * (1 + i % 4), [1, 8, 8], 2),
                loss: if i % 2 == 0 { LossKind::At } else { LossKind::Trades },
                attack: AttackConfig { steps: 1 + i % 5, ..AttackConfig::default() },
                ema: i % 3 == 0,
                seed: i as u64,
                ..TrainConfig::default()
            };
            RunRecord {
                run_id: config.run_id(),
                v: 1,
                config,
                clean_acc: 0.9,
                robust_acc_earlystop: 0.6,
                robust_acc_final: 0.2 * flops.powf(0.03),
                train_flops: flops,
                wall_seconds: 1.0,
                kwh: 0.1,
                usd: 0.012,
                co2_g: 56.63,
                best_epoch: 1,
                epochs_trained: 1,
                seed: i as u64,
                failed: false,
            }
        })
        .collect()
}

#[test]
fn reports_cover_every_kind() {
    let records = synthetic(40);
    let opts = ReportOptions::default();

    let summary = report(&records, ReportKind::SummaryCsv, &opts).unwrap();
    let mut rdr = csv::Reader::from_reader(summary.as_bytes());
    assert_eq!(rdr.headers().unwrap().len(), 15);
    assert_eq!(&rdr.headers().unwrap()[2], "config");
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 40);
    let cfg: TrainConfig = serde_json::from_str(&rows[0][2]).unwrap();
    assert!(records.iter().any(|r| r.config == cfg));

    let fit: serde_json::Value = serde_json::from_str(&report(&records, ReportKind::FitJson, &opts).unwrap()).unwrap();
    assert!((fit["r2"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((fit["alpha"].as_f64().unwrap() - 0.03).abs() < 1e-9);
    assert_eq!(fit["bins"], 19);

    let env = report(&records, ReportKind::EnvelopeCsv, &opts).unwrap();
    assert!(env.lines().count() - 1 <= 19);
    assert!(env.starts_with("flops,metric,run_id\n"));

    let pred: serde_json::Value =
        serde_json::from_str(&report(&records, ReportKind::PredictorJson, &opts).unwrap()).unwrap();
    assert_eq!(pred["n_train"], 28);
    assert_eq!(pred["n_test"], 12);
    assert_eq!(pred["feature_names"].as_array().unwrap().len(), 6);

    // Contents depend on the record set, not its order.
    let mut shuffled = records.clone();
    shuffled.reverse();
    for kind in ReportKind::ALL {
        assert_eq!(report(&records, kind, &opts).unwrap(), report(&shuffled, kind, &opts).unwrap(), "{kind:?}");
    }

    let dir = tempfile::tempdir().unwrap();
    let written = write_reports(&records, &ReportKind::ALL, &opts, dir.path()).unwrap();
    assert_eq!(written.len(), 4);
    assert!(written.iter().all(|p| p.exists()));
    assert!(matches!(report(&[], ReportKind::SummaryCsv, &opts), Err(Error::Data(_))));
}
