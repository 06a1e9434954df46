//! Single-hidden-layer network mapping a NARX regressor to a scalar output.
//!
//! Regressor order is `[u(t), u(t-1), ..., u(t-n_b), y(t-1), ..., y(t-n_a)]`.
//! The flat parameter layout, used for optimization and checkpoints, is
//! `w1_u` (row major, `Q x (n_b+1)`), `w1_y` (row major, `Q x n_a`), `b1`,
//! `w2`, `b2`.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Linear hidden layer. Turns the network into an FIR filter when
    /// `n_a = 0`; only used for equivalence checks.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarxConfig {
    pub n_b: usize,
    pub n_a: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl NarxConfig {
    pub fn new(n_b: usize, n_a: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden layer needs at least one neuron".into()));
        }
        Ok(Self {
            n_b,
            n_a,
            hidden,
            activation: Activation::Tanh,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.n_b + 1 + self.n_a
    }

    pub fn n_params(&self) -> usize {
        self.hidden * self.input_dim() + 2 * self.hidden + 1
    }

    /// First time index at which every lag refers to a recorded sample.
    pub fn first_full_index(&self) -> usize {
        self.n_b.max(self.n_a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    config: NarxConfig,
    /// `Q x (n_b + 1)`
    pub w1_u: Array2<f64>,
    /// `Q x n_a`
    pub w1_y: Array2<f64>,
    /// `1 x Q`
    pub b1: Array2<f64>,
    /// `Q x 1`
    pub w2: Array2<f64>,
    pub b2: f64,
}

/// Uniform fan-in initialization, zero biases.
pub fn init_params(config: NarxConfig, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = config.hidden;
    let bound1 = (1.0 / config.input_dim() as f64).sqrt();
    let bound2 = (1.0 / q as f64).sqrt();
    let mut p = MlpParams::zeros(config);
    for i in 0..q {
        for k in 0..=config.n_b {
            p.w1_u[[i, k]] = rng.random_range(-bound1..bound1);
        }
        for l in 0..config.n_a {
            p.w1_y[[i, l]] = rng.random_range(-bound1..bound1);
        }
    }
    for i in 0..q {
        p.w2[[i, 0]] = rng.random_range(-bound2..bound2);
    }
    p
}

/// Parameters recorded as tape leaves.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub w1_u: Var,
    pub w1_y: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamVars {
    /// In flat-layout order.
    pub fn all(&self) -> [Var; 5] {
        [self.w1_u, self.w1_y, self.b1, self.w2, self.b2]
    }
}

/// Concatenates per-leaf gradients (as returned for [`ParamVars::all`]) into
/// the flat layout.
pub fn flatten_grads(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.iter().copied()).collect()
}

impl MlpParams {
    pub fn zeros(config: NarxConfig) -> Self {
        let q = config.hidden;
        Self {
            config,
            w1_u: Array2::zeros((q, config.n_b + 1)),
            w1_y: Array2::zeros((q, config.n_a)),
            b1: Array2::zeros((1, q)),
            w2: Array2::zeros((q, 1)),
            b2: 0.0,
        }
    }

    pub fn config(&self) -> &NarxConfig {
        &self.config
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.config.n_params());
        v.extend(self.w1_u.iter());
        v.extend(self.w1_y.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.push(self.b2);
        v
    }

    pub fn from_flat(config: NarxConfig, theta: &[f64]) -> Result<Self> {
        if theta.len() != config.n_params() {
            return Err(Error::Dimension {
                expected: config.n_params(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        let q = config.hidden;
        let mut rest = theta;
        let mut take = |rows: usize, cols: usize| {
            let (head, tail) = rest.split_at(rows * cols);
            rest = tail;
            Array2::from_shape_vec((rows, cols), head.to_vec()).expect("sized split")
        };
        let w1_u = take(q, config.n_b + 1);
        let w1_y = take(q, config.n_a);
        let b1 = take(1, q);
        let w2 = take(q, 1);
        let b2 = take(1, 1)[[0, 0]];
        Ok(Self {
            config,
            w1_u,
            w1_y,
            b1,
            w2,
            b2,
        })
    }

    pub fn record(&self, tape: &mut Tape) -> Result<ParamVars> {
        Ok(ParamVars {
            w1_u: tape.leaf(self.w1_u.clone())?,
            w1_y: tape.leaf(self.w1_y.clone())?,
            b1: tape.leaf(self.b1.clone())?,
            w2: tape.leaf(self.w2.clone())?,
            b2: tape.lift(self.b2)?,
        })
    }

    /// Upper bound on `|forward(x)|` over all regressors.
    pub fn output_bound(&self) -> f64 {
        self.b2.abs() + self.w2.iter().map(|w| w.abs()).sum::<f64>()
    }

    /// Evaluates one regressor.
    pub fn forward(&self, regressor: &[f64]) -> Result<f64> {
        let c = &self.config;
        if regressor.len() != c.input_dim() {
            return Err(Error::Dimension {
                expected: c.input_dim(),
                got: regressor.len(),
            });
        }
        let (u, y) = regressor.split_at(c.n_b + 1);
        let u = ArrayView2::from_shape((1, u.len()), u).expect("row view");
        let y = ArrayView2::from_shape((1, y.len()), y).expect("row view");
        Ok(self.forward_rows(u, y)[[0, 0]])
    }

    /// Evaluates a batch: row `i` of `u_rows` and `y_rows` forms regressor `i`.
    /// Returns an `M x 1` column. Mirrors [`forward_taped`] operation for
    /// operation, so both produce identical bits.
    pub fn forward_rows(&self, u_rows: ArrayView2<f64>, y_rows: ArrayView2<f64>) -> Array2<f64> {
        let mut pre = matmul(u_rows, self.w1_u.view(), false, true);
        if self.config.n_a > 0 {
            pre = &pre + &matmul(y_rows, self.w1_y.view(), false, true);
        }
        pre = &pre + &self.b1;
        if self.config.activation == Activation::Tanh {
            pre.mapv_inplace(f64::tanh);
        }
        let out = matmul(pre.view(), self.w2.view(), false, false);
        out.mapv(|o| o + self.b2)
    }

    /// Partial derivatives of the output with respect to `u(t-k)`, `k = 0..=n_b`,
    /// for a linear network without output feedback. In that case the network
    /// is an FIR filter and these are its coefficients.
    pub fn linearize_check(&self, regressor: &[f64]) -> Result<Vec<f64>> {
        let c = &self.config;
        if c.activation != Activation::Identity {
            return Err(Error::Config(
                "linearize_check requires the identity activation".into(),
            ));
        }
        if c.n_a != 0 {
            return Err(Error::Config("linearize_check requires n_a = 0".into()));
        }
        if regressor.len() != c.input_dim() {
            return Err(Error::Dimension {
                expected: c.input_dim(),
                got: regressor.len(),
            });
        }
        let mut tape = Tape::new();
        let pv = self.record(&mut tape)?;
        let u = tape.leaf(Array2::from_shape_vec((1, regressor.len()), regressor.to_vec()).expect("row"))?;
        let out = forward_taped(&mut tape, c, &pv, u, None)?;
        let g = tape.backward(out, &[u])?;
        Ok(g[0].iter().copied().collect())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&ParamsFile::from(self))?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let file: ParamsFile = serde_json::from_str(&text)?;
        file.into_params()
    }
}

/// Checkpoint layout: structural header followed by the flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub n_b: usize,
    pub n_a: usize,
    pub q: usize,
    pub activation: Activation,
    pub theta: Vec<f64>,
}

impl From<&MlpParams> for ParamsFile {
    fn from(p: &MlpParams) -> Self {
        Self {
            n_b: p.config.n_b,
            n_a: p.config.n_a,
            q: p.config.hidden,
            activation: p.config.activation,
            theta: p.to_flat(),
        }
    }
}

impl ParamsFile {
    pub fn into_params(self) -> Result<MlpParams> {
        let config = NarxConfig::new(self.n_b, self.n_a, self.q)?.with_activation(self.activation);
        MlpParams::from_flat(config, &self.theta)
    }
}

/// Taped network evaluation on a batch of regressors.
///
/// `u_rows` is `M x (n_b+1)`; `y_rows` is `M x n_a` and may be `None` only
/// when `n_a = 0`. Returns an `M x 1` node.
pub fn forward_taped(
    tape: &mut Tape,
    config: &NarxConfig,
    pv: &ParamVars,
    u_rows: Var,
    y_rows: Option<Var>,
) -> Result<Var> {
    let mut pre = tape.matmul_t(u_rows, pv.w1_u, false, true)?;
    if config.n_a > 0 {
        let y_rows = y_rows.ok_or_else(|| Error::Config("missing output lags".into()))?;
        let py = tape.matmul_t(y_rows, pv.w1_y, false, true)?;
        pre = tape.add(pre, py)?;
    }
    let shape = tape.shape(pre)?;
    let b1 = tape.broadcast(pv.b1, shape)?;
    pre = tape.add(pre, b1)?;
    let h = match config.activation {
        Activation::Tanh => tape.tanh(pre)?,
        Activation::Identity => pre,
    };
    let out = tape.matmul(h, pv.w2)?;
    let b2 = tape.broadcast(pv.b2, (shape.0, 1))?;
    Ok(tape.add(out, b2)?)
}
