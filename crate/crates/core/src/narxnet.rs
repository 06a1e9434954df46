//! NARX dynamics on top of [`crate::net`]: one-step prediction, T-step
//! closed-loop simulation, free-run simulation, input sensitivities and the
//! three training objectives.
//!
//! Time conventions. A T-step window is anchored at the first predicted time
//! `s`. Measured outputs are used for every lag strictly before `s`; from `s`
//! on the model's own predictions are fed back. The window performs `T`
//! recursions, predicting `s, ..., s+T-1`, and its result is `y_hat(s+T-1)`.
//! With `T = 1` this is exactly the one-step predictor. The input sensitivity
//! `d_k` is the derivative of that result with respect to `u(s+T-1-k)`.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::{flatten_grads, forward_taped, Activation, MlpParams, NarxConfig, ParamVars};

/// Hyperparameters of the derivative-based regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    /// Decay base; sensitivity `k` is weighted by `alpha^-k`.
    pub alpha: f64,
    pub gamma: f64,
    /// Number of closed-loop recursions per window.
    pub horizon: usize,
    pub anchor_stride: usize,
}

impl RegConfig {
    pub fn new(alpha: f64, gamma: f64, horizon: usize, anchor_stride: usize) -> Result<Self> {
        let cfg = Self {
            alpha,
            gamma,
            horizon,
            anchor_stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // alpha = 0 would put an infinite weight on every k >= 1.
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.anchor_stride == 0 {
            return Err(Error::Config("anchor_stride must be at least 1".into()));
        }
        Ok(())
    }

    /// `alpha^-k`
    pub fn weight(&self, k: usize) -> f64 {
        self.alpha.powi(-(k as i32))
    }
}

/// Windows for a single T-step simulation anchored at time `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimBuffer {
    horizon: usize,
    /// `u(s-n_b) ..= u(s+T-1)`, oldest first.
    pub inputs: Vec<f64>,
    /// `y(s-n_a) ..= y(s-1)`, oldest first.
    pub outputs: Vec<f64>,
    /// `y_hat(s) ..= y_hat(s+T-1)`, filled by [`simulate_t_steps`].
    pub predicted: Vec<f64>,
}

impl SimBuffer {
    pub fn new(config: &NarxConfig, horizon: usize, inputs: Vec<f64>, outputs: Vec<f64>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if inputs.len() != config.n_b + horizon {
            return Err(Error::Dimension {
                expected: config.n_b + horizon,
                got: inputs.len(),
            });
        }
        if outputs.len() != config.n_a {
            return Err(Error::Dimension {
                expected: config.n_a,
                got: outputs.len(),
            });
        }
        Ok(Self {
            horizon,
            inputs,
            outputs,
            predicted: Vec::with_capacity(horizon),
        })
    }

    /// Cuts the windows for anchor `s` out of a record.
    pub fn from_record(config: &NarxConfig, u: &[f64], y: &[f64], anchor: usize, horizon: usize) -> Result<Self> {
        check_anchor(config, u.len().min(y.len()), anchor, horizon)?;
        Self::new(
            config,
            horizon,
            u[anchor - config.n_b..anchor + horizon].to_vec(),
            y[anchor - config.n_a..anchor].to_vec(),
        )
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

fn check_anchor(config: &NarxConfig, n: usize, anchor: usize, horizon: usize) -> Result<()> {
    if anchor < config.first_full_index() || anchor + horizon > n {
        return Err(Error::InsufficientData(format!(
            "anchor {anchor} with horizon {horizon} does not fit a record of {n} samples \
             (lags n_b={}, n_a={})",
            config.n_b, config.n_a
        )));
    }
    Ok(())
}

/// Anchors whose windows lie entirely inside a record of `n` samples, every
/// `stride`-th one.
pub fn feasible_anchors(config: &NarxConfig, n: usize, horizon: usize, stride: usize) -> Vec<usize> {
    let first = config.first_full_index();
    if n < first + horizon {
        return Vec::new();
    }
    (first..=n - horizon).step_by(stride.max(1)).collect()
}

/// One-step-ahead prediction from windows in regressor order:
/// `u_window = [u(t), ..., u(t-n_b)]`, `y_window = [y(t-1), ..., y(t-n_a)]`.
pub fn predict_one_step(params: &MlpParams, u_window: &[f64], y_window: &[f64]) -> Result<f64> {
    let c = params.config();
    if u_window.len() != c.n_b + 1 {
        return Err(Error::Dimension {
            expected: c.n_b + 1,
            got: u_window.len(),
        });
    }
    if y_window.len() != c.n_a {
        return Err(Error::Dimension {
            expected: c.n_a,
            got: y_window.len(),
        });
    }
    let mut reg = Vec::with_capacity(c.input_dim());
    reg.extend_from_slice(u_window);
    reg.extend_from_slice(y_window);
    params.forward(&reg)
}

/// Runs the T recursions of `buffer` and returns `y_hat(s+T-1)`.
pub fn simulate_t_steps(params: &MlpParams, buffer: &mut SimBuffer) -> Result<f64> {
    let c = params.config();
    if buffer.inputs.len() != c.n_b + buffer.horizon || buffer.outputs.len() != c.n_a {
        return Err(Error::InsufficientData("buffer windows do not match the model orders".into()));
    }
    buffer.predicted.clear();
    let mut u_win = vec![0.0; c.n_b + 1];
    let mut y_win = vec![0.0; c.n_a];
    for j in 0..buffer.horizon {
        for (k, slot) in u_win.iter_mut().enumerate() {
            *slot = buffer.inputs[c.n_b + j - k];
        }
        for (l, slot) in (1..=c.n_a).zip(y_win.iter_mut()) {
            *slot = if j >= l {
                buffer.predicted[j - l]
            } else {
                buffer.outputs[c.n_a + j - l]
            };
        }
        let p = predict_one_step(params, &u_win, &y_win)?;
        buffer.predicted.push(p);
    }
    Ok(buffer.predicted[buffer.horizon - 1])
}

/// A batch of T-step windows laid out for the taped rollout.
///
/// `inputs` is `M x (n_b+T)` with column `c` holding `u(s+T-1-c)`, so column
/// `k` is the input that sensitivity `d_k` refers to. `outputs` is `M x n_a`
/// with column `m` holding `y(s-1-m)`.
#[derive(Debug, Clone)]
pub struct AnchorBatch {
    pub anchors: Vec<usize>,
    pub horizon: usize,
    pub inputs: Array2<f64>,
    pub outputs: Array2<f64>,
}

impl AnchorBatch {
    pub fn from_record(config: &NarxConfig, u: &[f64], y: &[f64], horizon: usize, anchors: Vec<usize>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InsufficientData("no feasible anchor".into()));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let n = u.len().min(y.len());
        let width = config.n_b + horizon;
        let mut inputs = Array2::zeros((anchors.len(), width));
        let mut outputs = Array2::zeros((anchors.len(), config.n_a));
        for (row, &s) in anchors.iter().enumerate() {
            check_anchor(config, n, s, horizon)?;
            for c in 0..width {
                inputs[[row, c]] = u[s + horizon - 1 - c];
            }
            for m in 0..config.n_a {
                outputs[[row, m]] = y[s - 1 - m];
            }
        }
        Ok(Self {
            anchors,
            horizon,
            inputs,
            outputs,
        })
    }

    pub fn from_buffer(buffer: &SimBuffer) -> Self {
        let inputs: Vec<f64> = buffer.inputs.iter().rev().copied().collect();
        let outputs: Vec<f64> = buffer.outputs.iter().rev().copied().collect();
        Self {
            anchors: vec![0],
            horizon: buffer.horizon,
            inputs: Array2::from_shape_vec((1, inputs.len()), inputs).expect("row"),
            outputs: Array2::from_shape_vec((1, outputs.len()), outputs).expect("row"),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Taped closed-loop rollout over all windows of a batch; returns the
/// `M x 1` node of final predictions.
pub fn rollout_taped(
    tape: &mut Tape,
    config: &NarxConfig,
    pv: &ParamVars,
    inputs: Var,
    outputs: Option<Var>,
    horizon: usize,
) -> Result<Var> {
    Ok(*rollout_steps(tape, config, pv, inputs, outputs, horizon)?
        .last()
        .expect("horizon >= 1"))
}

/// Every intermediate prediction of the rollout, oldest first.
fn rollout_steps(
    tape: &mut Tape,
    config: &NarxConfig,
    pv: &ParamVars,
    inputs: Var,
    outputs: Option<Var>,
    horizon: usize,
) -> Result<Vec<Var>> {
    let na = config.n_a;
    let mut preds: Vec<Var> = Vec::with_capacity(horizon);
    // output lags as a shift register: newest prediction enters column 0
    let mut y_j = if na == 0 {
        None
    } else {
        Some(outputs.ok_or_else(|| Error::Config("missing measured outputs".into()))?)
    };
    for j in 0..horizon {
        if j > 0 && na > 0 {
            let newest = preds[j - 1];
            y_j = Some(if na == 1 {
                newest
            } else {
                let kept = tape.slice_cols(y_j.expect("n_a > 0"), 0, na - 1)?;
                tape.concat_cols(&[newest, kept])?
            });
        }
        let u_j = tape.slice_cols(inputs, horizon - 1 - j, config.n_b + 1)?;
        preds.push(forward_taped(tape, config, pv, u_j, y_j)?);
    }
    Ok(preds)
}

/// Records the batch rollout and returns `(inputs leaf, outputs leaf, result)`.
fn record_rollout(tape: &mut Tape, config: &NarxConfig, pv: &ParamVars, batch: &AnchorBatch) -> Result<(Var, Var)> {
    let inputs = tape.leaf(batch.inputs.clone())?;
    let outputs = tape.leaf(batch.outputs.clone())?;
    let out = rollout_taped(tape, config, pv, inputs, Some(outputs), batch.horizon)?;
    Ok((inputs, out))
}

/// Sensitivities `d_k` for `k = 0..=T` of every window in the batch, as an
/// `M x (T+1)` matrix.
pub fn input_sensitivities_batch(params: &MlpParams, batch: &AnchorBatch) -> Result<Array2<f64>> {
    let config = params.config();
    let mut tape = Tape::new();
    let pv = params.record(&mut tape)?;
    let (inputs, out) = record_rollout(&mut tape, config, &pv, batch)?;
    let g = tape.backward(out, &[inputs])?.remove(0);
    Ok(take_sensitivity_columns(&g, batch.horizon))
}

fn take_sensitivity_columns(g: &Array2<f64>, horizon: usize) -> Array2<f64> {
    let mut d = Array2::zeros((g.nrows(), horizon + 1));
    let k = g.ncols().min(horizon + 1);
    d.slice_mut(s![.., ..k]).assign(&g.slice(s![.., ..k]));
    d
}

/// `d_k = d y_hat(s+T-1) / d u(s+T-1-k)` for `k = 0..=T`.
pub fn input_sensitivities(params: &MlpParams, buffer: &SimBuffer) -> Result<Vec<f64>> {
    let c = params.config();
    if buffer.inputs.len() != c.n_b + buffer.horizon || buffer.outputs.len() != c.n_a {
        return Err(Error::InsufficientData("buffer windows do not match the model orders".into()));
    }
    let d = input_sensitivities_batch(params, &AnchorBatch::from_buffer(buffer))?;
    Ok(d.row(0).to_vec())
}

/// Records the weighted sensitivity penalty
/// `gamma * sum_k alpha^-k * mean_over_anchors(d_k^2)` for `k = 0..=T`.
/// The result stays differentiable with respect to the parameters.
pub fn regularizer_taped(
    tape: &mut Tape,
    config: &NarxConfig,
    pv: &ParamVars,
    batch: &AnchorBatch,
    reg: &RegConfig,
) -> Result<Var> {
    let (inputs, out) = record_rollout(tape, config, pv, batch)?;
    let g = tape.backward_as_vars(out, &[inputs])?[0];
    let width = tape.shape(g)?.1.min(reg.horizon + 1);
    let d = tape.slice_cols(g, 0, width)?;
    let sq = tape.square(d)?;
    let m = batch.len() as f64;
    let weights = Array2::from_shape_fn((width, 1), |(k, _)| reg.gamma * reg.weight(k) / m);
    let w = tape.leaf(weights)?;
    let per_anchor = tape.matmul(sq, w)?;
    Ok(tape.sum(per_anchor)?)
}

/// Regressor rows for one-step prediction over `t = max(n_a, n_b) .. N`.
#[derive(Debug, Clone)]
pub struct OneStepData {
    pub start: usize,
    pub u_rows: Array2<f64>,
    pub y_rows: Array2<f64>,
    pub targets: Array2<f64>,
}

impl OneStepData {
    pub fn new(config: &NarxConfig, u: &[f64], y: &[f64]) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension {
                expected: u.len(),
                got: y.len(),
            });
        }
        let start = config.first_full_index();
        if u.len() <= start {
            return Err(Error::InsufficientData(format!(
                "record of {} samples has no valid one-step target (needs > {start})",
                u.len()
            )));
        }
        let m = u.len() - start;
        let u_rows = Array2::from_shape_fn((m, config.n_b + 1), |(i, k)| u[start + i - k]);
        let y_rows = Array2::from_shape_fn((m, config.n_a), |(i, l)| y[start + i - l - 1]);
        let targets = Array2::from_shape_fn((m, 1), |(i, _)| y[start + i]);
        Ok(Self {
            start,
            u_rows,
            y_rows,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.nrows() == 0
    }

    pub fn predictions(&self, params: &MlpParams) -> Vec<f64> {
        params
            .forward_rows(self.u_rows.view(), self.y_rows.view())
            .into_iter()
            .collect()
    }

    /// Untaped mean squared one-step error.
    pub fn mse(&self, params: &MlpParams) -> f64 {
        let pred = self.predictions(params);
        let n = pred.len() as f64;
        pred.iter()
            .zip(self.targets.iter())
            .map(|(p, t)| (t - p) * (t - p))
            .sum::<f64>()
            / n
    }

    fn taped_mse(&self, tape: &mut Tape, config: &NarxConfig, pv: &ParamVars) -> Result<Var> {
        let u = tape.leaf(self.u_rows.clone())?;
        let y = tape.leaf(self.y_rows.clone())?;
        let t = tape.leaf(self.targets.clone())?;
        let p = forward_taped(tape, config, pv, u, Some(y))?;
        let e = tape.sub(t, p)?;
        let e2 = tape.square(e)?;
        let s = tape.sum(e2)?;
        Ok(tape.scale(s, 1.0 / self.len() as f64)?)
    }
}

/// Closed-loop simulation over a whole record. The delayed-output buffer is
/// seeded with `y_init` (the first `n_a` measured outputs); inputs before the
/// record are zero. Returns predictions for `t = n_a .. N`.
pub fn simulate_free_run(params: &MlpParams, u: &[f64], y_init: &[f64]) -> Result<Vec<f64>> {
    let c = params.config();
    if y_init.len() != c.n_a {
        return Err(Error::Dimension {
            expected: c.n_a,
            got: y_init.len(),
        });
    }
    if u.len() <= c.n_a {
        return Err(Error::InsufficientData(format!(
            "free run needs more than {} samples, got {}",
            c.n_a,
            u.len()
        )));
    }
    let tanh = c.activation == Activation::Tanh;
    let mut hist = Vec::with_capacity(u.len());
    hist.extend_from_slice(y_init);
    for t in c.n_a..u.len() {
        let mut out = params.b2;
        for i in 0..c.hidden {
            let mut acc = 0.0;
            for k in 0..=c.n_b.min(t) {
                acc += params.w1_u[[i, k]] * u[t - k];
            }
            for l in 1..=c.n_a {
                acc += params.w1_y[[i, l - 1]] * hist[t - l];
            }
            acc += params.b1[[0, i]];
            out += params.w2[[i, 0]] * if tanh { acc.tanh() } else { acc };
        }
        hist.push(out);
    }
    Ok(hist.split_off(c.n_a))
}

/// Free-run data: the whole record as one rollout anchored at `t = n_a`.
#[derive(Debug, Clone)]
pub struct FreeRunData {
    batch: AnchorBatch,
    targets: Array2<f64>,
}

impl FreeRunData {
    pub fn new(config: &NarxConfig, u: &[f64], y: &[f64]) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension {
                expected: u.len(),
                got: y.len(),
            });
        }
        let (n, na) = (u.len(), config.n_a);
        if n <= na {
            return Err(Error::InsufficientData(format!(
                "free run needs more than {na} samples, got {n}"
            )));
        }
        let horizon = n - na;
        let width = config.n_b + horizon;
        // column c holds u(n-1-c); times before the record are zero
        let inputs = Array2::from_shape_fn((1, width), |(_, c)| {
            let t = n as isize - 1 - c as isize;
            if t >= 0 {
                u[t as usize]
            } else {
                0.0
            }
        });
        let outputs = Array2::from_shape_fn((1, na), |(_, m)| y[na - 1 - m]);
        let targets = Array2::from_shape_fn((1, horizon), |(_, i)| y[na + i]);
        Ok(Self {
            batch: AnchorBatch {
                anchors: vec![na],
                horizon,
                inputs,
                outputs,
            },
            targets,
        })
    }

    fn taped_mse(&self, tape: &mut Tape, config: &NarxConfig, pv: &ParamVars) -> Result<Var> {
        let horizon = self.batch.horizon;
        let inputs = tape.leaf(self.batch.inputs.clone())?;
        let outputs = tape.leaf(self.batch.outputs.clone())?;
        let steps = rollout_steps(tape, config, pv, inputs, Some(outputs), horizon)?;
        let preds = tape.concat_cols(&steps)?;
        let t = tape.leaf(self.targets.clone())?;
        let e = tape.sub(t, preds)?;
        let e2 = tape.square(e)?;
        let s = tape.sum(e2)?;
        Ok(tape.scale(s, 1.0 / horizon as f64)?)
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Mean squared one-step prediction error.
    Prediction,
    /// Prediction error plus the weighted sensitivity penalty.
    Regularized(RegConfig),
    /// Mean squared free-run simulation error.
    Simulation,
}

/// An objective bound to one record, with all constant matrices built once.
#[derive(Debug, Clone)]
pub struct PreparedLoss {
    config: NarxConfig,
    objective: Objective,
    one_step: Option<OneStepData>,
    anchors: Option<AnchorBatch>,
    free_run: Option<FreeRunData>,
}

impl PreparedLoss {
    pub fn new(config: &NarxConfig, u: &[f64], y: &[f64], objective: Objective) -> Result<Self> {
        let mut prepared = Self {
            config: *config,
            objective,
            one_step: None,
            anchors: None,
            free_run: None,
        };
        match objective {
            Objective::Prediction => prepared.one_step = Some(OneStepData::new(config, u, y)?),
            Objective::Regularized(reg) => {
                reg.validate()?;
                prepared.one_step = Some(OneStepData::new(config, u, y)?);
                let anchors = feasible_anchors(config, u.len().min(y.len()), reg.horizon, reg.anchor_stride);
                if anchors.is_empty() {
                    return Err(Error::InsufficientData(format!(
                        "no anchor fits horizon {} in a record of {} samples",
                        reg.horizon,
                        u.len()
                    )));
                }
                prepared.anchors = Some(AnchorBatch::from_record(config, u, y, reg.horizon, anchors)?);
            }
            Objective::Simulation => prepared.free_run = Some(FreeRunData::new(config, u, y)?),
        }
        Ok(prepared)
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    fn record(&self, tape: &mut Tape, pv: &ParamVars) -> Result<Var> {
        let c = &self.config;
        match self.objective {
            Objective::Prediction => self.one_step.as_ref().expect("prepared").taped_mse(tape, c, pv),
            Objective::Regularized(reg) => {
                let mse = self.one_step.as_ref().expect("prepared").taped_mse(tape, c, pv)?;
                if reg.gamma == 0.0 {
                    return Ok(mse);
                }
                let batch = self.anchors.as_ref().expect("prepared");
                let pen = regularizer_taped(tape, c, pv, batch, &reg)?;
                Ok(tape.add(mse, pen)?)
            }
            Objective::Simulation => self.free_run.as_ref().expect("prepared").taped_mse(tape, c, pv),
        }
    }

    fn check_params(&self, params: &MlpParams) -> Result<()> {
        let c = params.config();
        if (c.n_b, c.n_a, c.hidden) != (self.config.n_b, self.config.n_a, self.config.hidden) {
            return Err(Error::Config("parameters do not match the prepared model orders".into()));
        }
        Ok(())
    }

    pub fn value(&self, params: &MlpParams) -> Result<f64> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let pv = params.record(&mut tape)?;
        let out = self.record(&mut tape, &pv)?;
        Ok(tape.scalar(out)?)
    }

    /// Loss value and its gradient in the flat parameter layout.
    pub fn value_and_grad(&self, params: &MlpParams) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let pv = params.record(&mut tape)?;
        let out = self.record(&mut tape, &pv)?;
        let grads = tape.backward(out, &pv.all())?;
        Ok((tape.scalar(out)?, flatten_grads(&grads)))
    }
}

/// Mean squared one-step prediction error over all valid targets.
pub fn loss_prediction(params: &MlpParams, u: &[f64], y: &[f64]) -> Result<f64> {
    PreparedLoss::new(params.config(), u, y, Objective::Prediction)?.value(params)
}

/// Prediction error plus the derivative-based penalty.
pub fn loss_regularized(params: &MlpParams, u: &[f64], y: &[f64], reg: &RegConfig) -> Result<f64> {
    PreparedLoss::new(params.config(), u, y, Objective::Regularized(*reg))?.value(params)
}

/// Mean squared free-run error over `t = n_a .. N`, seeded with the first
/// `n_a` measured outputs.
pub fn loss_simulation(params: &MlpParams, u: &[f64], y: &[f64]) -> Result<f64> {
    let na = params.config().n_a;
    if u.len() != y.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            got: y.len(),
        });
    }
    if y.len() <= na {
        return Err(Error::InsufficientData("record shorter than the output lag".into()));
    }
    let sim = simulate_free_run(params, u, &y[..na])?;
    Ok(sim
        .iter()
        .zip(&y[na..])
        .map(|(p, t)| (t - p) * (t - p))
        .sum::<f64>()
        / sim.len() as f64)
}
