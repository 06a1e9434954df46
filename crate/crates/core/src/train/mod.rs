//! Parameter optimization: Adam, early stopping, grid search and the
//! Monte-Carlo experiment driver.

mod monte_carlo;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::Dataset;
use crate::error::{Error, Result};
use crate::narxnet::{simulate_free_run, Objective, OneStepData, PreparedLoss, RegConfig};
use crate::net::{MlpParams, NarxConfig, ParamsFile};

pub use monte_carlo::{
    derive_seed, monte_carlo, run_once, CaseSpec, DrChoice, ExperimentSpec, MonteCarloResult, RunOutcome,
    TrainedModel,
};

/// A borrowed input/output record.
#[derive(Debug, Clone, Copy)]
pub struct Series<'a> {
    pub u: &'a [f64],
    pub y: &'a [f64],
}

impl<'a> Series<'a> {
    pub fn new(u: &'a [f64], y: &'a [f64]) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension {
                expected: u.len(),
                got: y.len(),
            });
        }
        if u.is_empty() {
            return Err(Error::InsufficientData("empty record".into()));
        }
        Ok(Self { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

impl<'a> From<&'a Dataset> for Series<'a> {
    fn from(d: &'a Dataset) -> Self {
        Series {
            u: d.u.samples(),
            y: d.y.samples(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grad.len() },
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient entry {i} ({}) at Adam step {}",
                grad[i],
                self.step + 1
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    state.step(params, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsCriterion {
    /// Mean squared one-step error on the validation record.
    PredictionVal,
    /// Mean squared free-run error on the validation record.
    SimulationVal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Prediction,
    DerivativeRegularized,
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub objective: Objective,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub es_criterion: EsCriterion,
    /// Initialization seed.
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainSpec {
    pub fn new(
        objective: Objective,
        max_epochs: usize,
        batch_size: usize,
        patience: usize,
        es_criterion: EsCriterion,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            objective,
            max_epochs,
            batch_size,
            patience,
            es_criterion,
            seed,
            adam: AdamConfig::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience must lie in 1..={}, got {}",
                self.max_epochs, self.patience
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Objective::Regularized(reg) = &self.objective {
            reg.validate()?;
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.objective {
            Objective::Prediction => LossKind::Prediction,
            Objective::Regularized(_) => LossKind::DerivativeRegularized,
            Objective::Simulation => LossKind::Simulation,
        }
    }

    pub fn reg(&self) -> Option<&RegConfig> {
        match &self.objective {
            Objective::Regularized(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub best_params: MlpParams,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub trace: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    best_params: ParamsFile,
    best_val: f64,
    best_epoch: usize,
    epochs_run: usize,
    trace: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ReportFile {
            best_params: ParamsFile::from(&self.best_params),
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            epochs_run: self.epochs_run,
            trace: self.trace.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ReportFile = serde_json::from_str(text)?;
        Ok(Self {
            best_params: f.best_params.into_params()?,
            best_val: f.best_val,
            best_epoch: f.best_epoch,
            epochs_run: f.epochs_run,
            trace: f.trace,
        })
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, r.val);
        }
        s
    }

    pub fn save(&self, json: impl AsRef<Path>, trace_csv: Option<&Path>) -> Result<()> {
        let json = json.as_ref();
        std::fs::write(json, self.to_json()?).map_err(|e| Error::io(json, e))?;
        if let Some(p) = trace_csv {
            std::fs::write(p, self.trace_csv()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Contiguous chunks of at most `batch_size` targets; each chunk carries the
/// preceding `context` samples so its lags are measured data.
fn batches(config: &NarxConfig, data: Series<'_>, spec: &TrainSpec) -> Result<Vec<PreparedLoss>> {
    let n = data.len();
    if spec.batch_size >= n {
        return Ok(vec![PreparedLoss::new(config, data.u, data.y, spec.objective)?]);
    }
    let context = config.first_full_index();
    let mut out = Vec::new();
    let mut start = context;
    while start < n {
        let end = (start + spec.batch_size).min(n);
        let lo = start - context;
        out.push(PreparedLoss::new(config, &data.u[lo..end], &data.y[lo..end], spec.objective)?);
        start = end;
    }
    Ok(out)
}

/// Validation criterion evaluator.
enum Validator {
    OneStep(OneStepData),
    Simulation { u: Vec<f64>, y: Vec<f64> },
}

impl Validator {
    fn new(config: &NarxConfig, val: Series<'_>, criterion: EsCriterion) -> Result<Self> {
        Ok(match criterion {
            EsCriterion::PredictionVal => Validator::OneStep(OneStepData::new(config, val.u, val.y)?),
            EsCriterion::SimulationVal => {
                if val.len() <= config.n_a {
                    return Err(Error::InsufficientData(format!(
                        "validation record of {} samples is too short for free run",
                        val.len()
                    )));
                }
                Validator::Simulation {
                    u: val.u.to_vec(),
                    y: val.y.to_vec(),
                }
            }
        })
    }

    fn score(&self, params: &MlpParams) -> Result<f64> {
        match self {
            Validator::OneStep(d) => Ok(d.mse(params)),
            Validator::Simulation { u, y } => {
                let na = params.config().n_a;
                let sim = simulate_free_run(params, u, &y[..na])?;
                let n = sim.len() as f64;
                Ok(sim.iter().zip(&y[na..]).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / n)
            }
        }
    }
}

/// Adam with early stopping; returns the best validation snapshot.
pub fn train(init: &MlpParams, train_data: Series<'_>, val_data: Series<'_>, spec: &TrainSpec) -> Result<TrainReport> {
    spec.validate()?;
    let config = *init.config();
    let losses = batches(&config, train_data, spec)?;
    let validator = Validator::new(&config, val_data, spec.es_criterion)?;
    let kind = spec.loss_kind();

    let mut theta = init.to_flat();
    let mut params = init.clone();
    let mut adam = AdamState::new(theta.len(), spec.adam);
    let mut best_params = init.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut trace = Vec::new();

    for epoch in 1..=spec.max_epochs {
        let mut train_loss = 0.0;
        for loss in &losses {
            let (value, grad) = loss.value_and_grad(&params)?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("{kind:?} loss is {value} at epoch {epoch}")));
            }
            adam.step(&mut theta, &grad)
                .map_err(|e| Error::Numerical(format!("{kind:?} loss, epoch {epoch}: {e}")))?;
            params = MlpParams::from_flat(config, &theta)
                .map_err(|e| Error::Numerical(format!("{kind:?} loss, epoch {epoch}: {e}")))?;
            train_loss += value;
        }
        train_loss /= losses.len() as f64;
        let val = validator.score(&params)?;
        trace.push(EpochRecord { epoch, train_loss, val });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_params = params.clone();
        } else if !val.is_finite() || epoch - best_epoch >= spec.patience {
            break;
        }
    }
    if !best_val.is_finite() {
        return Err(Error::Numerical(format!("{kind:?} training never produced a finite validation score")));
    }
    Ok(TrainReport {
        best_params,
        best_val,
        epochs_run: trace.len(),
        best_epoch,
        trace,
    })
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `n` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.log10(), hi.log10(), n).into_iter().map(|e| 10f64.powf(e)).collect()
}

pub fn default_alpha_grid() -> Vec<f64> {
    linspace(0.60, 0.75, 10)
}

pub fn default_gamma_grid() -> Vec<f64> {
    logspace(5e-7, 5e-3, 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub gamma: f64,
    pub best_val: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub alpha: f64,
    pub gamma: f64,
    pub report: TrainReport,
    /// All points in enumeration order (alpha-major).
    pub points: Vec<GridPoint>,
}

/// Trains one regularized model per `(alpha, gamma)` from the same initial
/// parameters and keeps the one with the lowest validation criterion. Ties go
/// to the earliest point in alpha-major order.
pub fn grid_search(
    init: &MlpParams,
    train_data: Series<'_>,
    val_data: Series<'_>,
    alphas: &[f64],
    gammas: &[f64],
    base: &TrainSpec,
) -> Result<GridResult> {
    if alphas.is_empty() || gammas.is_empty() {
        return Err(Error::Config("grid search needs non-empty alpha and gamma grids".into()));
    }
    let Some(base_reg) = base.reg().copied() else {
        return Err(Error::Config("grid search needs a regularized base spec".into()));
    };
    let pairs: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| gammas.iter().map(move |&g| (a, g))).collect();
    let reports: Vec<Result<TrainReport>> = pairs
        .par_iter()
        .map(|&(alpha, gamma)| {
            let mut spec = base.clone();
            spec.objective = Objective::Regularized(RegConfig { alpha, gamma, ..base_reg });
            train(init, train_data, val_data, &spec)
                .map_err(|e| Error::Numerical(format!("grid point alpha={alpha}, gamma={gamma}: {e}")))
        })
        .collect();
    let mut best: Option<(usize, TrainReport)> = None;
    let mut points = Vec::with_capacity(pairs.len());
    for (i, (r, &(alpha, gamma))) in reports.into_iter().zip(&pairs).enumerate() {
        let r = r?;
        points.push(GridPoint {
            alpha,
            gamma,
            best_val: r.best_val,
            epochs_run: r.epochs_run,
        });
        if best.as_ref().is_none_or(|(_, b)| r.best_val < b.best_val) {
            best = Some((i, r));
        }
    }
    let (i, report) = best.expect("non-empty grid");
    Ok(GridResult {
        alpha: pairs[i].0,
        gamma: pairs[i].1,
        report,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut x = vec![1.0, -2.0, 0.5];
        for _ in 0..100 {
            s.step(&mut x, &[0.0; 3]).unwrap();
        }
        assert_eq!(x, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut x = vec![0.0; 3];
        s.step(&mut x, &[2.0, -0.5, 1e-3]).unwrap();
        // m_hat / sqrt(v_hat) = sign(g); eps shifts it by at most eps/|g|
        for (xi, sign) in x.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((xi - sign * 1e-3).abs() < 1e-3 * 1e-5);
        }
    }

    #[test]
    fn adam_minimizes_square() {
        // checkpoints and first-hit step from torch.optim.Adam(lr=1e-3), float64
        let reference = [
            (500, 0.5605075254378475),
            (1000, 0.257665027571658),
            (1500, 0.08875216057874165),
            (2000, 0.020662311203242627),
            (3000, 0.00021298015740407066),
        ];
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut x = vec![1.0];
        let mut hit = None;
        for k in 1..=3000 {
            let g = [2.0 * x[0]];
            s.step(&mut x, &g).unwrap();
            if x[0].abs() < 1e-3 && hit.is_none() {
                hit = Some(k);
            }
            if let Some(&(_, want)) = reference.iter().find(|(step, _)| *step == k) {
                assert!((x[0] - want).abs() < 1e-9 * want.abs().max(1e-3), "step {k}: {} vs {want}", x[0]);
            }
        }
        assert_eq!(hit, Some(2722));
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut x = vec![0.0; 2];
        assert!(matches!(s.step(&mut x, &[f64::NAN, 0.0]), Err(Error::Numerical(_))));
        assert!(s.step(&mut x, &[0.0]).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn spec_invariants() {
        assert!(TrainSpec::new(Objective::Prediction, 10, 1024, 0, EsCriterion::PredictionVal, 0).is_err());
        assert!(TrainSpec::new(Objective::Prediction, 10, 1024, 11, EsCriterion::PredictionVal, 0).is_err());
        let bad = Objective::Regularized(RegConfig {
            alpha: 0.7,
            gamma: -1.0,
            horizon: 5,
            anchor_stride: 1,
        });
        assert!(TrainSpec::new(bad, 10, 1024, 5, EsCriterion::PredictionVal, 0).is_err());
        let ok = TrainSpec::new(Objective::Simulation, 10, 1024, 10, EsCriterion::SimulationVal, 0).unwrap();
        assert_eq!(ok.loss_kind(), LossKind::Simulation);
        assert!(ok.reg().is_none());
    }

    #[test]
    fn grids() {
        let a = default_alpha_grid();
        assert_eq!(a.len(), 10);
        assert_eq!(a[0], 0.60);
        assert!((a[1] - 0.616_666_666_666_666_7).abs() < 1e-12);
        assert!((a[9] - 0.75).abs() < 1e-15);
        let g = default_gamma_grid();
        assert_eq!(g.len(), 10);
        assert!((g[0] - 5e-7).abs() < 1e-20);
        assert!((g[9] - 5e-3).abs() < 1e-15);
        assert!((g[1] / g[0] - 10f64.powf(4.0 / 9.0)).abs() < 1e-9);
    }

    fn toy_record(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let teacher = init_params(NarxConfig::new(2, 2, 2).unwrap(), 99);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = vec![0.0, 0.0];
        let sim = simulate_free_run(&teacher, &u, &y).unwrap();
        y.extend(sim);
        (u, y)
    }

    #[test]
    fn early_stopping_keeps_best_snapshot() {
        let (u, y) = toy_record(120, 1);
        let (uv, yv) = toy_record(60, 2);
        let init = init_params(NarxConfig::new(2, 2, 3).unwrap(), 5);
        let spec = TrainSpec::new(Objective::Prediction, 300, 1024, 20, EsCriterion::PredictionVal, 5).unwrap();
        let rep = train(&init, Series::new(&u, &y).unwrap(), Series::new(&uv, &yv).unwrap(), &spec).unwrap();
        let min = rep.trace.iter().map(|r| r.val).fold(f64::INFINITY, f64::min);
        assert_eq!(rep.best_val, min);
        assert_eq!(rep.trace[rep.best_epoch - 1].val, min);
        let check = OneStepData::new(init.config(), &uv, &yv).unwrap().mse(&rep.best_params);
        assert_eq!(check, rep.best_val);
        assert_eq!(rep.epochs_run, rep.trace.len());
        let back = TrainReport::from_json(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
        assert!(rep.trace_csv().starts_with("epoch,train_loss,val\n1,"));
    }

    #[test]
    fn minibatches_cover_the_record() {
        let (u, y) = toy_record(100, 3);
        let (uv, yv) = toy_record(40, 4);
        let init = init_params(NarxConfig::new(2, 2, 2).unwrap(), 6);
        let mut spec = TrainSpec::new(Objective::Prediction, 5, 30, 5, EsCriterion::PredictionVal, 6).unwrap();
        let s = Series::new(&u, &y).unwrap();
        let parts = batches(init.config(), s, &spec).unwrap();
        assert_eq!(parts.len(), 4); // 98 targets in chunks of 30
        let rep = train(&init, s, Series::new(&uv, &yv).unwrap(), &spec).unwrap();
        assert_eq!(rep.epochs_run, 5);
        spec.batch_size = 1024;
        assert_eq!(batches(init.config(), s, &spec).unwrap().len(), 1);
    }

    #[test]
    fn grid_search_single_point_equals_train() {
        let (u, y) = toy_record(80, 5);
        let (uv, yv) = toy_record(40, 6);
        let (s, v) = (Series::new(&u, &y).unwrap(), Series::new(&uv, &yv).unwrap());
        let init = init_params(NarxConfig::new(2, 2, 2).unwrap(), 7);
        let reg = RegConfig::new(0.7, 1e-3, 4, 2).unwrap();
        let spec = TrainSpec::new(Objective::Regularized(reg), 40, 1024, 40, EsCriterion::PredictionVal, 7).unwrap();
        let g = grid_search(&init, s, v, &[0.7], &[1e-3], &spec).unwrap();
        let direct = train(&init, s, v, &spec).unwrap();
        assert_eq!(g.report, direct);
        assert_eq!((g.alpha, g.gamma), (0.7, 1e-3));
        assert_eq!(g.points.len(), 1);
        assert!(grid_search(&init, s, v, &[], &[1e-3], &spec).is_err());
        let plain = TrainSpec { objective: Objective::Prediction, ..spec };
        assert!(grid_search(&init, s, v, &[0.7], &[1e-3], &plain).is_err());
    }

    #[test]
    fn grid_selection_is_order_invariant() {
        let (u, y) = toy_record(80, 7);
        let (uv, yv) = toy_record(40, 8);
        let (s, v) = (Series::new(&u, &y).unwrap(), Series::new(&uv, &yv).unwrap());
        let init = init_params(NarxConfig::new(2, 2, 2).unwrap(), 9);
        let reg = RegConfig::new(0.7, 1e-3, 4, 2).unwrap();
        let spec = TrainSpec::new(Objective::Regularized(reg), 30, 1024, 30, EsCriterion::PredictionVal, 9).unwrap();
        let a = grid_search(&init, s, v, &[0.6, 0.75], &[1e-4, 1e-1], &spec).unwrap();
        let b = grid_search(&init, s, v, &[0.75, 0.6], &[1e-1, 1e-4], &spec).unwrap();
        assert_eq!((a.alpha, a.gamma), (b.alpha, b.gamma));
        assert_eq!(a.report, b.report);
    }
}
