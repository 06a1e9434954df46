//! Wiener-Hammerstein benchmark data: multisine excitation, the two LTI
//! blocks around a tanh nonlinearity, output noise and dataset splits.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty sample sequence at normalized sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Signal {
    samples: Vec<f64>,
}

impl Signal {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("empty signal".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.samples
    }

    pub fn mean(&self) -> f64 {
        mean(&self.samples)
    }

    /// Population variance (divides by `n`).
    pub fn variance(&self) -> f64 {
        variance(&self.samples)
    }
}

impl TryFrom<Vec<f64>> for Signal {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Signal::new(v)
    }
}

impl From<Signal> for Vec<f64> {
    fn from(s: Signal) -> Self {
        s.samples
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub(crate) fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Validation,
    WhiteTest,
    ColoredTest,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Train, Role::Validation, Role::WhiteTest, Role::ColoredTest];

    pub fn file_stem(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "val",
            Role::WhiteTest => "white_test",
            Role::ColoredTest => "colored_test",
        }
    }

    pub fn is_test(self) -> bool {
        matches!(self, Role::WhiteTest | Role::ColoredTest)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::WhiteTest => "white_test",
            Role::ColoredTest => "colored_test",
        })
    }
}

/// Generation metadata stored next to each dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub role: Role,
    pub seed: u64,
    pub sigma_v: f64,
    pub band_fraction: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub u: Signal,
    pub y: Signal,
    pub y0: Option<Signal>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(u: Signal, y: Signal, y0: Option<Signal>, meta: DatasetMeta) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension {
                expected: u.len(),
                got: y.len(),
            });
        }
        if let Some(y0) = &y0 {
            if y0.len() != y.len() {
                return Err(Error::Dimension {
                    expected: y.len(),
                    got: y0.len(),
                });
            }
            if meta.role.is_test() && y0 != &y {
                return Err(Error::Format(format!("{} data must be noiseless", meta.role)));
            }
        }
        Ok(Self { u, y, y0, meta })
    }

    pub fn role(&self) -> Role {
        self.meta.role
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// CSV with header `t,u,y,y0`; `y0` is blank when unknown.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["t", "u", "y", "y0"]).map_err(|e| csv_io(path, e))?;
        for t in 0..self.len() {
            let y0 = self
                .y0
                .as_ref()
                .map(|s| s.samples()[t].to_string())
                .unwrap_or_default();
            w.write_record([
                t.to_string(),
                self.u.samples()[t].to_string(),
                self.y.samples()[t].to_string(),
                y0,
            ])
            .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, meta: DatasetMeta) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "u", "y", "y0"] {
            return Err(Error::Format(format!(
                "{}: expected header t,u,y,y0",
                path.display()
            )));
        }
        let (mut u, mut y, mut y0) = (Vec::new(), Vec::new(), Vec::new());
        let mut have_y0 = true;
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec[i].trim().parse::<f64>().map_err(|e| {
                    Error::Format(format!("{}: row {}: column {i}: {e}", path.display(), row + 1))
                })
            };
            u.push(field(1)?);
            y.push(field(2)?);
            if rec[3].trim().is_empty() {
                have_y0 = false;
            } else {
                y0.push(field(3)?);
            }
        }
        let y0 = if have_y0 { Some(Signal::new(y0)?) } else { None };
        Dataset::new(Signal::new(u)?, Signal::new(y)?, y0, meta)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let stem = self.meta.role.file_stem();
        self.write_csv(dir.join(format!("{stem}.csv")))?;
        let sidecar = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(dir: impl AsRef<Path>, role: Role) -> Result<Self> {
        let dir = dir.as_ref();
        let stem = role.file_stem();
        let sidecar = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        if meta.role != role {
            return Err(Error::Format(format!(
                "{}: sidecar role {} does not match {}",
                sidecar.display(),
                meta.role,
                role
            )));
        }
        let ds = Self::read_csv(dir.join(format!("{stem}.csv")), meta)?;
        if ds.len() != ds.meta.n {
            return Err(Error::Format(format!(
                "{stem}: sidecar says {} samples, csv has {}",
                ds.meta.n,
                ds.len()
            )));
        }
        Ok(ds)
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Rational transfer function `B(q^-1) / A(q^-1)` with `a_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiBlock {
    b: Vec<f64>,
    a: Vec<f64>,
}

impl LtiBlock {
    pub fn new(b: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if b.is_empty() || a.is_empty() {
            return Err(Error::Config("empty polynomial".into()));
        }
        if a[0] != 1.0 {
            return Err(Error::Config(format!("denominator must be monic, a_0 = {}", a[0])));
        }
        let block = Self { b, a };
        let r = block.spectral_radius();
        if !(r < 1.0) {
            return Err(Error::Config(format!("unstable block: largest pole modulus {r}")));
        }
        Ok(block)
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    /// Pole moduli from the companion matrix of `A`.
    pub fn pole_moduli(&self) -> Vec<f64> {
        let n = self.a.len() - 1;
        if n == 0 {
            return Vec::new();
        }
        let mut c = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            c[(0, j)] = -self.a[j + 1];
        }
        for i in 1..n {
            c[(i, i - 1)] = 1.0;
        }
        c.complex_eigenvalues().iter().map(|z| z.norm()).collect()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.pole_moduli().into_iter().fold(0.0, f64::max)
    }

    /// Value at `q = 1`.
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        let mut imp = vec![0.0; n];
        if n > 0 {
            imp[0] = 1.0;
        }
        lti_filter(self, &imp)
    }
}

/// First linear block.
pub fn g1() -> LtiBlock {
    LtiBlock::new(vec![0.0451, 0.0902, 0.0451], vec![1.0, -1.3860, 0.7069])
        .expect("G1 coefficients are stable")
}

/// Second linear block.
pub fn g2() -> LtiBlock {
    LtiBlock::new(
        vec![0.2545, 0.0073, 0.0073, 0.2545],
        vec![1.0, -1.1495, 0.7459, -0.0729],
    )
    .expect("G2 coefficients are stable")
}

/// Difference equation with zero initial conditions.
pub fn lti_filter(block: &LtiBlock, u: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; u.len()];
    for t in 0..u.len() {
        let mut acc = 0.0;
        for (i, b) in block.b.iter().enumerate().take(t + 1) {
            acc += b * u[t - i];
        }
        for (j, a) in block.a.iter().enumerate().skip(1).take(t) {
            acc -= a * y[t - j];
        }
        y[t] = acc;
    }
    y
}

/// Noiseless system output `G2(tanh(G1(u)))`.
pub fn wh_simulate(u: &[f64]) -> Vec<f64> {
    let x: Vec<f64> = lti_filter(&g1(), u).into_iter().map(f64::tanh).collect();
    lti_filter(&g2(), &x)
}

/// Number of excited bins. The Nyquist bin is left out: a cosine there is
/// phase-degenerate and would break the flat amplitude spectrum.
pub fn multisine_bins(n: usize, band_fraction: f64) -> usize {
    let k = (band_fraction * n as f64).floor() as usize;
    k.min((n - 1) / 2)
}

/// Random-phase multisine with flat amplitude over bins `1..=K`, zero mean
/// and unit (population) variance.
pub fn multisine(n: usize, band_fraction: f64, seed: u64) -> Result<Signal> {
    if n < 2 {
        return Err(Error::Config(format!("multisine needs n >= 2, got {n}")));
    }
    if !(band_fraction > 0.0 && band_fraction <= 0.5) {
        return Err(Error::Config(format!(
            "band fraction must lie in (0, 0.5], got {band_fraction}"
        )));
    }
    let k = multisine_bins(n, band_fraction);
    if k == 0 {
        return Err(Error::Config(format!(
            "band fraction {band_fraction} excites no bin at n = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    for bin in 1..=k {
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let z = Complex::from_polar(1.0, phi);
        spec[bin] = z;
        spec[n - bin] = z.conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let mut x: Vec<f64> = spec.iter().map(|z| z.re).collect();
    let m = mean(&x);
    x.iter_mut().for_each(|v| *v -= m);
    let s = variance(&x).sqrt();
    x.iter_mut().for_each(|v| *v /= s);
    Signal::new(x)
}

/// i.i.d. zero-mean Gaussian samples.
pub fn gaussian_noise(n: usize, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise level: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

/// Sizes and levels of the benchmark experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub n_train_record: usize,
    pub train_fraction: f64,
    pub sigma_v: f64,
    pub train_band: f64,
    pub n_test: usize,
    pub white_band: f64,
    pub colored_band: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n_train_record: 1024,
            train_fraction: 0.8,
            sigma_v: 0.01,
            train_band: 0.5,
            n_test: 10000,
            white_band: 0.5,
            colored_band: 0.1,
        }
    }
}

impl DataSpec {
    pub fn n_train(&self) -> usize {
        (self.train_fraction * self.n_train_record as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let n_train = self.n_train();
        if n_train == 0 || n_train >= self.n_train_record {
            return Err(Error::Config(format!(
                "split {} of {} samples leaves an empty part",
                self.train_fraction, self.n_train_record
            )));
        }
        if !(self.sigma_v >= 0.0 && self.sigma_v.is_finite()) {
            return Err(Error::Config(format!("noise level must be >= 0, got {}", self.sigma_v)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub train: Dataset,
    pub val: Dataset,
    pub white_test: Dataset,
    pub colored_test: Dataset,
}

impl Experiment {
    pub fn get(&self, role: Role) -> &Dataset {
        match role {
            Role::Train => &self.train,
            Role::Validation => &self.val,
            Role::WhiteTest => &self.white_test,
            Role::ColoredTest => &self.colored_test,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for role in Role::ALL {
            self.get(role).save(dir)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            train: Dataset::load(dir, Role::Train)?,
            val: Dataset::load(dir, Role::Validation)?,
            white_test: Dataset::load(dir, Role::WhiteTest)?,
            colored_test: Dataset::load(dir, Role::ColoredTest)?,
        })
    }
}

/// Independent sub-seeds for the four random streams of one experiment.
fn sub_seeds(seed: u64) -> [u64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.random(), rng.random(), rng.random(), rng.random()]
}

pub fn generate_experiment(seed: u64) -> Experiment {
    generate_experiment_with(&DataSpec::default(), seed).expect("default data spec is valid")
}

pub fn generate_experiment_with(spec: &DataSpec, seed: u64) -> Result<Experiment> {
    spec.validate()?;
    let [s_u, s_v, s_white, s_colored] = sub_seeds(seed);

    let n = spec.n_train_record;
    let u = multisine(n, spec.train_band, s_u)?.into_vec();
    let y0 = wh_simulate(&u);
    let v = gaussian_noise(n, spec.sigma_v, s_v)?;
    let y: Vec<f64> = y0.iter().zip(&v).map(|(a, b)| a + b).collect();

    let n_train = spec.n_train();
    let part = |role: Role, range: std::ops::Range<usize>| -> Result<Dataset> {
        let meta = DatasetMeta {
            role,
            seed,
            sigma_v: spec.sigma_v,
            band_fraction: spec.train_band,
            n: range.len(),
        };
        Dataset::new(
            Signal::new(u[range.clone()].to_vec())?,
            Signal::new(y[range.clone()].to_vec())?,
            Some(Signal::new(y0[range].to_vec())?),
            meta,
        )
    };
    let test = |role: Role, band: f64, sub: u64| -> Result<Dataset> {
        let u = multisine(spec.n_test, band, sub)?;
        let y = Signal::new(wh_simulate(u.samples()))?;
        let meta = DatasetMeta {
            role,
            seed,
            sigma_v: 0.0,
            band_fraction: band,
            n: spec.n_test,
        };
        Dataset::new(u, y.clone(), Some(y), meta)
    };

    Ok(Experiment {
        train: part(Role::Train, 0..n_train)?,
        val: part(Role::Validation, n_train..n)?,
        white_test: test(Role::WhiteTest, spec.white_band, s_white)?,
        colored_test: test(Role::ColoredTest, spec.colored_band, s_colored)?,
    })
}
