use std::path::Path;
use std::process::Command;

use narx_cli::commands::{meta_path, records_csv};
use narx_cli::{cmd_evaluate, cmd_generate, cmd_reproduce, cmd_train, ExperimentConfig, Scale};
use narx_core::bench::{Dataset, DatasetMeta, Experiment, Role, Signal};
use narx_core::narxnet::simulate_free_run;
use narx_core::train::EsCriterion;
use narx_core::{FirModel, MetricRecord, Mode, Model, ModelKind, OrderCase, TrainReport};

fn rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
seed = 11
hidden = 3
n_a = 2
n_b = 2
max_epochs = 15
patience = 15
horizon = 4
anchor_stride = 5
alpha_grid = [0.7]
gamma_grid = [0.0]
workers = 1

[data]
n_train_record = 200
n_test = 300
"#,
    )
    .unwrap()
}

#[test]
fn generate_writes_the_split() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("nested/data");
    cmd_generate(&ExperimentConfig::default(), &dir).unwrap();
    assert_eq!(rows(&dir.join("train.csv")), 819);
    assert_eq!(rows(&dir.join("val.csv")), 205);
    assert_eq!(rows(&dir.join("white_test.csv")), 10000);
    assert_eq!(rows(&dir.join("colored_test.csv")), 10000);
    for stem in ["train", "val", "white_test", "colored_test"] {
        assert!(dir.join(format!("{stem}.json")).exists());
    }
    let header = std::fs::read_to_string(dir.join("train.csv")).unwrap();
    assert!(header.starts_with("t,u,y,y0\n"));
}

#[test]
fn generate_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    cmd_generate(&cfg, &tmp.path().join("a")).unwrap();
    cmd_generate(&cfg, &tmp.path().join("b")).unwrap();
    for f in ["train.csv", "val.csv", "white_test.csv", "colored_test.csv", "experiment.json"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let other = ExperimentConfig { seed: 12, ..tiny() };
    cmd_generate(&other, &tmp.path().join("c")).unwrap();
    assert_ne!(
        std::fs::read(tmp.path().join("a/train.csv")).unwrap(),
        std::fs::read(tmp.path().join("c/train.csv")).unwrap()
    );
}

#[test]
fn lti_on_hmo_has_31_taps_and_degrades_on_colored_input() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_generate(&ExperimentConfig::default(), &data).unwrap();
    let cfg = ExperimentConfig {
        model_kind: Some(ModelKind::Lti),
        order_case: Some(OrderCase::Hmo),
        ..Default::default()
    };
    let out = cmd_train(&cfg, &data, &tmp.path().join("lti")).unwrap();
    let Model::Fir(f) = &out.model else { panic!("LTI is a FIR model") };
    assert_eq!(f.n_b(), 30);
    assert_eq!(f.coefficients().len(), 31);

    let model_path = tmp.path().join("lti/model.json");
    assert!(meta_path(&model_path).exists());
    let recs = cmd_evaluate(&ExperimentConfig::default(), &model_path, &data, &tmp.path().join("eval")).unwrap();
    assert_eq!(recs.len(), 6);
    assert!(recs.iter().all(|r| r.model_kind == ModelKind::Lti && r.order_case == OrderCase::Hmo));
    let sim = |role| {
        recs.iter()
            .find(|r| r.dataset_role == role && r.mode == Mode::Simulation)
            .unwrap()
            .nrmse
    };
    assert!(sim(Role::ColoredTest) > sim(Role::WhiteTest));

    let text = std::fs::read_to_string(tmp.path().join("eval/metrics.json")).unwrap();
    let back: Vec<MetricRecord> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, recs);
    assert_eq!(std::fs::read_to_string(tmp.path().join("eval/metrics.csv")).unwrap(), records_csv(&recs));
}

#[test]
fn dr_with_zero_gamma_matches_es() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_generate(&tiny(), &data).unwrap();
    let es = ExperimentConfig {
        model_kind: Some(ModelKind::Es),
        ..tiny()
    };
    let dr = ExperimentConfig {
        model_kind: Some(ModelKind::Dr),
        ..tiny()
    };
    let a = cmd_train(&es, &data, &tmp.path().join("es")).unwrap();
    let b = cmd_train(&dr, &data, &tmp.path().join("dr")).unwrap();
    let (ra, rb) = (a.report.unwrap(), b.report.unwrap());
    assert_eq!(ra.trace, rb.trace);
    assert_eq!(ra.best_params, rb.best_params);
    assert_eq!(b.meta.gamma, Some(0.0));
    assert_eq!(b.grid.len(), 1);
    assert!(tmp.path().join("dr/grid.csv").exists());
    let saved = TrainReport::from_json(&std::fs::read_to_string(tmp.path().join("dr/report.json")).unwrap()).unwrap();
    assert_eq!(saved, rb);
}

#[test]
fn noe_validates_on_free_run_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_generate(&tiny(), &data).unwrap();
    let cfg = ExperimentConfig {
        model_kind: Some(ModelKind::Noe),
        ..tiny()
    };
    assert_eq!(cfg.es_criterion(ModelKind::Noe), EsCriterion::SimulationVal);
    let out = cmd_train(&cfg, &data, &tmp.path().join("noe")).unwrap();
    let report = out.report.unwrap();
    let val = Experiment::load(&data).unwrap().val;
    let (u, y) = (val.u.samples(), val.y.samples());
    let na = report.best_params.config().n_a;
    let sim = simulate_free_run(&report.best_params, u, &y[..na]).unwrap();
    let mse = sim.iter().zip(&y[na..]).map(|(p, t)| (t - p).powi(2)).sum::<f64>() / sim.len() as f64;
    assert!((mse - report.best_val).abs() <= 1e-12 * mse.max(1.0));
}

#[test]
fn oracle_model_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let fir = FirModel::new(vec![0.5, -0.25, 0.125]).unwrap();
    for (i, role) in Role::ALL.into_iter().enumerate() {
        let u: Vec<f64> = (0..120).map(|t| ((t * (i + 3)) as f64 * 0.37).sin()).collect();
        let y = Signal::new(fir.predict(&u)).unwrap();
        let meta = DatasetMeta {
            role,
            seed: 0,
            sigma_v: 0.0,
            band_fraction: 0.5,
            n: u.len(),
        };
        let y0 = role.is_test().then(|| y.clone());
        Dataset::new(Signal::new(u).unwrap(), y, y0, meta).unwrap().save(&data).unwrap();
    }
    let model_path = tmp.path().join("oracle.json");
    Model::Fir(fir).save(&model_path).unwrap();
    let cfg = ExperimentConfig {
        model_kind: Some(ModelKind::Lti),
        n_b: Some(2),
        n_a: Some(2),
        hidden: Some(1),
        ..Default::default()
    };
    let recs = cmd_evaluate(&cfg, &model_path, &data, &tmp.path().join("eval")).unwrap();
    assert_eq!(recs.len(), 6);
    for r in recs {
        assert!(r.nrmse.abs() < 1e-14, "{r:?}");
    }
}

#[test]
fn reproduce_fills_every_cell_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.runs = Some(2);
    cfg.gamma_grid = Some(vec![1e-4, 1e-2]);
    let a = cmd_reproduce(&cfg, Scale::Desk, &tmp.path().join("a")).unwrap();
    assert_eq!(a.result.successes(), 2);
    assert_eq!(a.result.records.len(), 2 * 4 * 3 * 2);
    assert!(!a.table1.contains("NA") && !a.table2.contains("NA"));
    assert_eq!(a.table2.lines().next().unwrap(), "case,dataset,LTI,ES,DR,NOE");
    assert_eq!(a.table2.lines().count(), 1 + 3);
    assert_eq!(a.profile.as_ref().unwrap().len(), 4 + 1);
    for f in ["table1.csv", "table2.csv", "summaries.json", "quantiles.csv", "runs.json", "profile.csv", "config.json"] {
        assert!(tmp.path().join("a").join(f).exists(), "{f}");
    }
    assert!(tmp.path().join("a/models/run1_CUSTOM_DR.json").exists());

    cmd_reproduce(&cfg, Scale::Desk, &tmp.path().join("b")).unwrap();
    for f in ["table1.csv", "table2.csv", "quantiles.csv", "summaries.json"] {
        let x = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

fn narx() -> Command {
    Command::new(env!("CARGO_BIN_EXE_narx"))
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let status = narx().arg("frobnicate").output().unwrap().status;
    assert_eq!(status.code(), Some(1));
    let status = narx().args(["train", "--kind", "XYZ", "--data", "x"]).output().unwrap().status;
    assert_eq!(status.code(), Some(1));
    let status = narx().arg("--help").output().unwrap().status;
    assert_eq!(status.code(), Some(0));

    let missing = tmp.path().join("nothing");
    let out = narx()
        .args(["train", "--kind", "LTI", "--data"])
        .arg(&missing)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing"));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "max_epochs = 0\n").unwrap();
    let out = narx().args(["reproduce", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn binary_generate_then_train() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, tiny().to_toml()).unwrap();
    let data = tmp.path().join("data");
    let out = narx().args(["generate", "--config"]).arg(&cfg).arg("--out").arg(&data).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = narx()
        .args(["train", "--kind", "es", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(tmp.path().join("es"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ES CUSTOM"));
    assert!(Model::load(tmp.path().join("es/model.json")).is_ok());
}
