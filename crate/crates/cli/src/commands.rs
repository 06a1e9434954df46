use std::path::{Path, PathBuf};

use narx_core::bench::{generate_experiment_with, Experiment};
use narx_core::eval::{decay_profile, profile_csv, quantiles_csv, table_csv, GroupSummary, TABLE_ROLES};
use narx_core::fir::fit_ls;
use narx_core::net::init_params;
use narx_core::train::{derive_seed, monte_carlo, CaseSpec, ExperimentSpec, MonteCarloResult, RunOutcome};
use narx_core::train::{grid_search, train, GridPoint, Series};
use narx_core::{MetricRecord, Mode, Model, ModelKind, Objective, OrderCase, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scale};
use crate::error::{create_dir, json, write, CliError};

/// Data stream of run 0, so `generate` + `train` with seed `s` reproduce the
/// first Monte-Carlo run of `reproduce` with master seed `s`.
pub fn data_seed(seed: u64) -> u64 {
    derive_seed(seed, 0, 0)
}

pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, 0, 1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenerateSidecar {
    seed: u64,
    data_seed: u64,
    config: ExperimentConfig,
}

/// Writes the four datasets (CSV + JSON sidecar each) and `experiment.json`.
pub fn cmd_generate(cfg: &ExperimentConfig, dir: &Path) -> Result<Experiment, CliError> {
    create_dir(dir)?;
    let exp = generate_experiment_with(&cfg.data_spec(), data_seed(cfg.seed))?;
    exp.save(dir)?;
    let side = GenerateSidecar {
        seed: cfg.seed,
        data_seed: data_seed(cfg.seed),
        config: cfg.clone(),
    };
    write(&dir.join("experiment.json"), json(&side))?;
    Ok(exp)
}

fn load_experiment(dir: &Path) -> Result<Experiment, CliError> {
    Experiment::load(dir).map_err(|e| CliError::Data(format!("datasets in {}: {e}", dir.display())))
}

/// Self-description written next to every model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub case: CaseSpec,
    pub init_seed: u64,
    pub data_dir: PathBuf,
    /// Chosen regularization for DR.
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub meta: ModelMeta,
    pub report: Option<TrainReport>,
    pub grid: Vec<GridPoint>,
}

pub fn meta_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("meta.json")
}

fn fit(cfg: &ExperimentConfig, kind: ModelKind, data_dir: &Path) -> Result<TrainOutput, CliError> {
    let spec = cfg.experiment_spec(Scale::Full)?;
    let case = cfg.case_spec()?;
    let data = load_experiment(data_dir)?;
    let (tr, va) = (Series::from(&data.train), Series::from(&data.val));
    let seed = init_seed(cfg.seed);
    let init = init_params(case.config, seed);
    let mut meta = ModelMeta {
        kind,
        case,
        init_seed: seed,
        data_dir: data_dir.to_path_buf(),
        alpha: None,
        gamma: None,
        config: cfg.clone(),
    };
    let es = cfg.es_criterion(kind);
    let out = match kind {
        ModelKind::Lti => TrainOutput {
            model: Model::Fir(fit_ls(tr.u, tr.y, case.config.n_b)?),
            meta,
            report: None,
            grid: Vec::new(),
        },
        ModelKind::Es | ModelKind::Noe => {
            let objective = if kind == ModelKind::Es {
                Objective::Prediction
            } else {
                Objective::Simulation
            };
            let report = train(&init, tr, va, &spec.train_spec(objective, es, seed)?)?;
            TrainOutput {
                model: Model::Narx(report.best_params.clone()),
                meta,
                report: Some(report),
                grid: Vec::new(),
            }
        }
        ModelKind::Dr => {
            let base = spec.reg(spec.alpha_grid[0], spec.gamma_grid[0])?;
            let ts = spec.train_spec(Objective::Regularized(base), es, seed)?;
            let g = grid_search(&init, tr, va, &spec.alpha_grid, &spec.gamma_grid, &ts)?;
            meta.alpha = Some(g.alpha);
            meta.gamma = Some(g.gamma);
            TrainOutput {
                model: Model::Narx(g.report.best_params.clone()),
                meta,
                report: Some(g.report),
                grid: g.points,
            }
        }
    };
    Ok(out)
}

fn save_trained(out: &TrainOutput, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    let model_path = dir.join("model.json");
    out.model.save(&model_path)?;
    write(&meta_path(&model_path), json(&out.meta))?;
    if let Some(r) = &out.report {
        r.save(dir.join("report.json"), Some(&dir.join("trace.csv")))?;
    }
    if !out.grid.is_empty() {
        write(&dir.join("grid.json"), json(&out.grid))?;
        let mut csv = String::from("alpha,gamma,best_val,epochs_run\n");
        for p in &out.grid {
            csv.push_str(&format!("{},{},{},{}\n", p.alpha, p.gamma, p.best_val, p.epochs_run));
        }
        write(&dir.join("grid.csv"), csv)?;
    }
    Ok(())
}

/// Fits the configured model kind. Writes `model.json`, `model.meta.json`
/// and, for networks, `report.json` and `trace.csv`; DR adds the grid.
pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutput, CliError> {
    let kind = cfg.model_kind();
    let out = cfg.thread_pool()?.install(|| fit(cfg, kind, data_dir))?;
    save_trained(&out, out_dir)?;
    Ok(out)
}

/// DR grid search regardless of the configured model kind.
pub fn cmd_grid_search(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutput, CliError> {
    let out = cfg.thread_pool()?.install(|| fit(cfg, ModelKind::Dr, data_dir))?;
    save_trained(&out, out_dir)?;
    Ok(out)
}

pub fn records_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from("run,model_kind,order_case,dataset_role,mode,nrmse\n");
    for r in records {
        let mode = match r.mode {
            Mode::OneStep => "one_step",
            Mode::Simulation => "simulation",
        };
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.run,
            r.model_kind,
            r.order_case,
            r.dataset_role.file_stem(),
            mode,
            r.nrmse
        ));
    }
    s
}

/// Scores a model in both modes on the training, white and colored test sets.
/// Labels and the scoring start come from the model's sidecar when present.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    model_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<MetricRecord>, CliError> {
    let model = Model::load(model_path)?;
    let meta: Option<ModelMeta> = match std::fs::read_to_string(meta_path(model_path)) {
        Ok(text) => Some(
            serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", meta_path(model_path).display())))?,
        ),
        Err(_) => None,
    };
    let (kind, case) = match &meta {
        Some(m) => (m.kind, m.case),
        None => (cfg.model_kind(), cfg.case_spec()?),
    };
    let start = model.first_index().max(case.config.first_full_index());
    let data = load_experiment(data_dir)?;
    let mut records = Vec::new();
    for (role, _) in TABLE_ROLES {
        let d = data.get(role);
        for mode in [Mode::OneStep, Mode::Simulation] {
            let nrmse = model.nrmse(mode, d.u.samples(), d.y.samples(), start)?;
            records.push(MetricRecord {
                run: 0,
                model_kind: kind,
                order_case: case.case,
                dataset_role: role,
                mode,
                nrmse,
            });
        }
    }
    create_dir(out_dir)?;
    write(&out_dir.join("metrics.json"), json(&records))?;
    write(&out_dir.join("metrics.csv"), records_csv(&records))?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct ReproduceOutput {
    pub spec: ExperimentSpec,
    pub result: MonteCarloResult,
    pub summaries: Vec<GroupSummary>,
    /// Mean |d_k| of the first successful run's DR model (HMO if present) on
    /// its training record.
    pub profile: Option<Vec<f64>>,
    pub table1: String,
    pub table2: String,
}

fn profile_model(spec: &ExperimentSpec, result: &MonteCarloResult) -> Option<(usize, OrderCase)> {
    let case = spec
        .cases
        .iter()
        .find(|c| c.case == OrderCase::Hmo)
        .or(spec.cases.first())?
        .case;
    let run = result.runs.iter().find(|r| r.error.is_none())?;
    run.models.iter().any(|m| m.kind == ModelKind::Dr && m.order_case == case).then_some((run.run, case))
}

/// The Monte-Carlo protocol at the given scale. Output files:
/// `table1.csv` (one-step), `table2.csv` (simulation), `summaries.json`,
/// `quantiles.csv`, `metrics.{csv,json}`, `runs.json` (seeds, DR choices,
/// failures), `profile.csv`, `models/` and `config.json`.
pub fn cmd_reproduce(cfg: &ExperimentConfig, scale: Scale, out_dir: &Path) -> Result<ReproduceOutput, CliError> {
    let spec = cfg.experiment_spec(scale)?;
    let result = cfg.thread_pool()?.install(|| monte_carlo(&spec))?;
    for r in &result.runs {
        if let Some(e) = &r.error {
            eprintln!("run {} failed: {e}", r.run);
        }
    }
    if result.successes() == 0 {
        return Err(CliError::Numerical("every Monte-Carlo run failed".into()));
    }
    let summaries = result.summaries();
    let cases: Vec<OrderCase> = spec.cases.iter().map(|c| c.case).collect();
    let table1 = table_csv(&summaries, Mode::OneStep, &cases);
    let table2 = table_csv(&summaries, Mode::Simulation, &cases);

    let profile = match profile_model(&spec, &result) {
        Some((run, case)) => {
            let outcome = &result.runs.iter().find(|r| r.run == run).expect("run exists");
            let model = outcome
                .models
                .iter()
                .find(|m| m.kind == ModelKind::Dr && m.order_case == case)
                .expect("model exists");
            let Model::Narx(params) = &model.model else {
                unreachable!("DR models are networks")
            };
            let data = generate_experiment_with(&spec.data, outcome.data_seed)?;
            Some(decay_profile(params, data.train.u.samples(), data.train.y.samples(), spec.horizon)?)
        }
        None => None,
    };

    create_dir(out_dir)?;
    write(&out_dir.join("config.json"), json(&spec))?;
    write(&out_dir.join("table1.csv"), &table1)?;
    write(&out_dir.join("table2.csv"), &table2)?;
    write(&out_dir.join("summaries.json"), json(&summaries))?;
    write(&out_dir.join("quantiles.csv"), quantiles_csv(&summaries))?;
    write(&out_dir.join("metrics.json"), json(&result.records))?;
    write(&out_dir.join("metrics.csv"), records_csv(&result.records))?;
    write(&out_dir.join("runs.json"), json(&result.runs))?;
    if let Some(p) = &profile {
        write(&out_dir.join("profile.csv"), profile_csv(p))?;
    }
    let models_dir = out_dir.join("models");
    create_dir(&models_dir)?;
    for r in result.runs.iter().filter(|r| r.error.is_none()) {
        save_run_models(r, &models_dir)?;
    }
    Ok(ReproduceOutput {
        spec,
        result,
        summaries,
        profile,
        table1,
        table2,
    })
}

fn save_run_models(run: &RunOutcome, dir: &Path) -> Result<(), CliError> {
    for m in &run.models {
        m.model.save(dir.join(format!("run{}_{}_{}.json", run.run, m.order_case, m.kind)))?;
    }
    Ok(())
}
