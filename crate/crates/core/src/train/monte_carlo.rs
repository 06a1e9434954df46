use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{default_alpha_grid, default_gamma_grid, grid_search, train, AdamConfig, EsCriterion, Series, TrainSpec};
use crate::bench::{generate_experiment_with, DataSpec, Experiment, Role};
use crate::error::{Error, Result};
use crate::eval::{summarize, GroupSummary, MetricRecord, Mode, Model, ModelKind, OrderCase, TABLE_ROLES};
use crate::fir::fit_ls;
use crate::narxnet::{Objective, RegConfig};
use crate::net::{init_params, NarxConfig};

/// SplitMix64 finalizer applied to `(master, run, stream)`.
pub fn derive_seed(master: u64, run: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(run.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case: OrderCase,
    pub config: NarxConfig,
}

impl CaseSpec {
    pub fn preset(case: OrderCase) -> Result<Self> {
        let config = case
            .preset()
            .ok_or_else(|| Error::Config("custom orders need an explicit configuration".into()))?;
        Ok(Self { case, config })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub master_seed: u64,
    pub n_runs: usize,
    pub data: DataSpec,
    pub cases: Vec<CaseSpec>,
    pub models: Vec<ModelKind>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub horizon: usize,
    pub anchor_stride: usize,
    pub alpha_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
}

impl ExperimentSpec {
    /// The full protocol: 10 runs, 10x10 grid, 10000 epochs, patience 1000.
    pub fn full(master_seed: u64) -> Self {
        Self {
            master_seed,
            n_runs: 10,
            data: DataSpec::default(),
            cases: vec![
                CaseSpec::preset(OrderCase::Hmo).expect("preset"),
                CaseSpec::preset(OrderCase::Omo).expect("preset"),
            ],
            models: ModelKind::ALL.to_vec(),
            max_epochs: 10000,
            patience: 1000,
            batch_size: 1024,
            adam: AdamConfig::default(),
            horizon: 50,
            anchor_stride: 1,
            alpha_grid: default_alpha_grid(),
            gamma_grid: default_gamma_grid(),
        }
    }

    /// Reduced budget: 3 runs, 3x3 grid, 3000 epochs, patience 300, every
    /// fourth anchor.
    pub fn desk(master_seed: u64) -> Self {
        Self {
            n_runs: 3,
            max_epochs: 3000,
            patience: 300,
            anchor_stride: 4,
            alpha_grid: vec![0.60, 0.675, 0.75],
            gamma_grid: vec![5e-7, 5e-5, 5e-3],
            ..Self::full(master_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be >= 1".into()));
        }
        if self.cases.is_empty() || self.models.is_empty() {
            return Err(Error::Config("need at least one order case and one model kind".into()));
        }
        if self.models.contains(&ModelKind::Dr) && (self.alpha_grid.is_empty() || self.gamma_grid.is_empty()) {
            return Err(Error::Config("DR needs non-empty alpha and gamma grids".into()));
        }
        self.data.validate()?;
        self.train_spec(Objective::Prediction, EsCriterion::PredictionVal, 0)?;
        self.reg(self.alpha_grid.first().copied().unwrap_or(0.7), 0.0)?;
        Ok(())
    }

    pub fn train_spec(&self, objective: Objective, es: EsCriterion, seed: u64) -> Result<TrainSpec> {
        let mut spec = TrainSpec::new(objective, self.max_epochs, self.batch_size, self.patience, es, seed)?;
        spec.adam = self.adam;
        Ok(spec)
    }

    pub fn reg(&self, alpha: f64, gamma: f64) -> Result<RegConfig> {
        RegConfig::new(alpha, gamma, self.horizon, self.anchor_stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrChoice {
    pub order_case: OrderCase,
    pub alpha: f64,
    pub gamma: f64,
    pub best_val: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub order_case: OrderCase,
    pub kind: ModelKind,
    pub model: Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub error: Option<String>,
    pub dr_choices: Vec<DrChoice>,
    #[serde(skip)]
    pub models: Vec<TrainedModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub runs: Vec<RunOutcome>,
    /// Records of successful runs, ordered by run.
    pub records: Vec<MetricRecord>,
}

impl MonteCarloResult {
    pub fn summaries(&self) -> Vec<GroupSummary> {
        summarize(&self.records)
    }

    pub fn successes(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_none()).count()
    }
}

fn score(
    run: usize,
    case: &CaseSpec,
    kind: ModelKind,
    model: &Model,
    data: &Experiment,
    out: &mut Vec<MetricRecord>,
) -> Result<()> {
    let start = case.config.first_full_index();
    for (role, _) in TABLE_ROLES {
        let d = data.get(role);
        for mode in [Mode::OneStep, Mode::Simulation] {
            let nrmse = model.nrmse(mode, d.u.samples(), d.y.samples(), start)?;
            out.push(MetricRecord {
                run,
                model_kind: kind,
                order_case: case.case,
                dataset_role: role,
                mode,
                nrmse,
            });
        }
    }
    Ok(())
}

/// One Monte-Carlo run: fresh data and initialization, every model kind on
/// every order case.
pub fn run_once(spec: &ExperimentSpec, run: usize) -> Result<(Vec<MetricRecord>, RunOutcome)> {
    let data_seed = derive_seed(spec.master_seed, run as u64, 0);
    let init_seed = derive_seed(spec.master_seed, run as u64, 1);
    let data = generate_experiment_with(&spec.data, data_seed)?;
    let (tr, va) = (Series::from(&data.train), Series::from(&data.val));
    debug_assert_eq!(data.val.role(), Role::Validation);

    let mut records = Vec::new();
    let mut outcome = RunOutcome {
        run,
        data_seed,
        init_seed,
        error: None,
        dr_choices: Vec::new(),
        models: Vec::new(),
    };
    for case in &spec.cases {
        let init = init_params(case.config, init_seed);
        for &kind in &spec.models {
            let model = match kind {
                ModelKind::Lti => Model::Fir(fit_ls(tr.u, tr.y, case.config.n_b)?),
                ModelKind::Es => {
                    let ts = spec.train_spec(Objective::Prediction, EsCriterion::PredictionVal, init_seed)?;
                    Model::Narx(train(&init, tr, va, &ts)?.best_params)
                }
                ModelKind::Dr => {
                    let base = spec.reg(spec.alpha_grid[0], spec.gamma_grid[0])?;
                    let ts = spec.train_spec(Objective::Regularized(base), EsCriterion::PredictionVal, init_seed)?;
                    let g = grid_search(&init, tr, va, &spec.alpha_grid, &spec.gamma_grid, &ts)?;
                    outcome.dr_choices.push(DrChoice {
                        order_case: case.case,
                        alpha: g.alpha,
                        gamma: g.gamma,
                        best_val: g.report.best_val,
                    });
                    Model::Narx(g.report.best_params)
                }
                ModelKind::Noe => {
                    let ts = spec.train_spec(Objective::Simulation, EsCriterion::SimulationVal, init_seed)?;
                    Model::Narx(train(&init, tr, va, &ts)?.best_params)
                }
            };
            score(run, case, kind, &model, &data, &mut records)
                .map_err(|e| Error::Numerical(format!("{} {kind}: {e}", case.case)))?;
            outcome.models.push(TrainedModel {
                order_case: case.case,
                kind,
                model,
            });
        }
    }
    Ok((records, outcome))
}

/// Runs are independent; failures are kept in the outcome list and their
/// records dropped.
pub fn monte_carlo(spec: &ExperimentSpec) -> Result<MonteCarloResult> {
    spec.validate()?;
    let results: Vec<_> = (0..spec.n_runs).into_par_iter().map(|run| (run, run_once(spec, run))).collect();
    let mut runs = Vec::with_capacity(results.len());
    let mut records = Vec::new();
    for (run, r) in results {
        match r {
            Ok((recs, outcome)) => {
                records.extend(recs);
                runs.push(outcome);
            }
            Err(e) => runs.push(RunOutcome {
                run,
                data_seed: derive_seed(spec.master_seed, run as u64, 0),
                init_seed: derive_seed(spec.master_seed, run as u64, 1),
                error: Some(e.to_string()),
                dr_choices: Vec::new(),
                models: Vec::new(),
            }),
        }
    }
    Ok(MonteCarloResult { runs, records })
}
