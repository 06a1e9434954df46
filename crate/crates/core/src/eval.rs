//! NRMSE metrics, Monte-Carlo summaries and sensitivity decay profiles.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{variance, Role};
use crate::error::{Error, Result};
use crate::fir::FirModel;
use crate::narxnet::{feasible_anchors, input_sensitivities_batch, simulate_free_run, AnchorBatch, OneStepData};
use crate::net::{MlpParams, NarxConfig, ParamsFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelKind {
    Lti,
    Es,
    Dr,
    Noe,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Lti, ModelKind::Es, ModelKind::Dr, ModelKind::Noe];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Lti => "LTI",
            ModelKind::Es => "ES",
            ModelKind::Dr => "DR",
            ModelKind::Noe => "NOE",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LTI" => Ok(ModelKind::Lti),
            "ES" => Ok(ModelKind::Es),
            "DR" => Ok(ModelKind::Dr),
            "NOE" => Ok(ModelKind::Noe),
            _ => Err(Error::Config(format!("unknown model kind {s:?} (LTI, ES, DR, NOE)"))),
        }
    }
}

/// Model-order case. `Custom` marks explicitly given orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OrderCase {
    Hmo,
    Omo,
    Custom,
}

impl OrderCase {
    /// Preset orders `(Q, n_a, n_b)`.
    pub fn preset(self) -> Option<NarxConfig> {
        match self {
            OrderCase::Hmo => Some(NarxConfig::new(30, 30, 20).expect("valid preset")),
            OrderCase::Omo => Some(NarxConfig::new(15, 15, 10).expect("valid preset")),
            OrderCase::Custom => None,
        }
    }
}

impl fmt::Display for OrderCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderCase::Hmo => "HMO",
            OrderCase::Omo => "OMO",
            OrderCase::Custom => "CUSTOM",
        })
    }
}

impl std::str::FromStr for OrderCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HMO" => Ok(OrderCase::Hmo),
            "OMO" => Ok(OrderCase::Omo),
            "CUSTOM" => Ok(OrderCase::Custom),
            _ => Err(Error::Config(format!("unknown order case {s:?} (HMO, OMO, CUSTOM)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OneStep,
    Simulation,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::OneStep => "one_step",
            Mode::Simulation => "simulation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run: usize,
    pub model_kind: ModelKind,
    pub order_case: OrderCase,
    pub dataset_role: Role,
    pub mode: Mode,
    pub nrmse: f64,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.nrmse.is_finite() && self.nrmse >= 0.0) {
            return Err(Error::Numerical(format!("invalid NRMSE {}", self.nrmse)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Standard deviation of the measured output.
    #[default]
    Std,
    /// Variance of the measured output, as the formula is printed.
    Variance,
}

/// RMSE divided by the (population) standard deviation of `y`.
pub fn nrmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    nrmse_with(y, y_hat, Denominator::Std)
}

pub fn nrmse_with(y: &[f64], y_hat: &[f64], denominator: Denominator) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            got: y_hat.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::InsufficientData("NRMSE of an empty sequence".into()));
    }
    let var = variance(y);
    if !(var > 0.0) {
        return Err(Error::InsufficientData("NRMSE undefined for constant output".into()));
    }
    let mse = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    let value = mse.sqrt()
        / match denominator {
            Denominator::Std => var.sqrt(),
            Denominator::Variance => var,
        };
    if !value.is_finite() {
        return Err(Error::Numerical(format!("NRMSE is {value}")));
    }
    Ok(value)
}

/// An identified model of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Fir(FirModel),
    Narx(MlpParams),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ModelFile {
    Fir { g: FirModel },
    Narx(ParamsFile),
}

impl Model {
    /// Earliest time index this model can be scored from.
    pub fn first_index(&self) -> usize {
        match self {
            Model::Fir(_) => 0,
            Model::Narx(p) => p.config().first_full_index(),
        }
    }

    /// Predictions for `t = start .. N`.
    pub fn predict(&self, mode: Mode, u: &[f64], y: &[f64], start: usize) -> Result<Vec<f64>> {
        if u.len() != y.len() {
            return Err(Error::Dimension {
                expected: u.len(),
                got: y.len(),
            });
        }
        if start < self.first_index() || start >= u.len() {
            return Err(Error::InsufficientData(format!(
                "cannot score from t = {start} on {} samples (model needs t >= {})",
                u.len(),
                self.first_index()
            )));
        }
        match self {
            Model::Fir(m) => Ok(m.predict(u).split_off(start)),
            Model::Narx(p) => match mode {
                Mode::OneStep => {
                    let d = OneStepData::new(p.config(), u, y)?;
                    let mut pred = d.predictions(p);
                    Ok(pred.split_off(start - d.start))
                }
                Mode::Simulation => {
                    let na = p.config().n_a;
                    let mut sim = simulate_free_run(p, u, &y[..na])?;
                    Ok(sim.split_off(start - na))
                }
            },
        }
    }

    pub fn nrmse(&self, mode: Mode, u: &[f64], y: &[f64], start: usize) -> Result<f64> {
        let pred = self.predict(mode, u, y, start)?;
        nrmse(&y[start..], &pred)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            Model::Fir(g) => ModelFile::Fir { g: g.clone() },
            Model::Narx(p) => ModelFile::Narx(ParamsFile::from(p)),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(match serde_json::from_str(text)? {
            ModelFile::Fir { g } => Model::Fir(g),
            ModelFile::Narx(p) => Model::Narx(p.into_params()?),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Mean `|d*_k|` over every feasible anchor, `k = 0..=T`.
pub fn decay_profile(params: &MlpParams, u: &[f64], y: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let anchors = feasible_anchors(params.config(), u.len().min(y.len()), horizon, 1);
    if anchors.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no anchor fits horizon {horizon} in {} samples",
            u.len()
        )));
    }
    let batch = AnchorBatch::from_record(params.config(), u, y, horizon, anchors)?;
    let d = input_sensitivities_batch(params, &batch)?;
    let m = d.nrows() as f64;
    Ok(d.columns().into_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>() / m).collect())
}

/// Least-squares slope of `log(profile[k] + 1e-12)` over `k in lo..=hi`.
pub fn log_slope(profile: &[f64], lo: usize, hi: usize) -> Result<f64> {
    if hi >= profile.len() || hi <= lo {
        return Err(Error::InsufficientData(format!(
            "slope window {lo}..={hi} outside profile of length {}",
            profile.len()
        )));
    }
    let pts: Vec<(f64, f64)> = (lo..=hi).map(|k| (k as f64, (profile[k] + 1e-12).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

pub fn profile_csv(profile: &[f64]) -> String {
    let mut s = String::from("k,mean_abs_sensitivity\n");
    for (k, v) in profile.iter().enumerate() {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// Quantile of sorted data, linear interpolation at `h = (n-1) p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile(&v, 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub model_kind: ModelKind,
    pub order_case: OrderCase,
    pub dataset_role: Role,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    #[serde(flatten)]
    pub key: GroupKey,
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-group medians, quartiles and extremes, sorted by group key.
pub fn summarize(records: &[MetricRecord]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = GroupKey {
            model_kind: r.model_kind,
            order_case: r.order_case,
            dataset_role: r.dataset_role,
            mode: r.mode,
        };
        groups.entry(key).or_default().push(r.nrmse);
    }
    groups
        .into_iter()
        .map(|(key, mut v)| {
            v.sort_by(f64::total_cmp);
            GroupSummary {
                key,
                n: v.len(),
                median: quantile(&v, 0.5),
                q1: quantile(&v, 0.25),
                q3: quantile(&v, 0.75),
                min: v[0],
                max: v[v.len() - 1],
            }
        })
        .collect()
}

pub fn find_summary(
    summaries: &[GroupSummary],
    kind: ModelKind,
    case: OrderCase,
    role: Role,
    mode: Mode,
) -> Option<&GroupSummary> {
    summaries.iter().find(|s| {
        s.key
            == GroupKey {
                model_kind: kind,
                order_case: case,
                dataset_role: role,
                mode,
            }
    })
}

/// Roles shown in the summary tables, in row order.
pub const TABLE_ROLES: [(Role, &str); 3] = [
    (Role::Train, "Training"),
    (Role::WhiteTest, "White Test"),
    (Role::ColoredTest, "Colored Test"),
];

/// Median table: one row per (case, dataset), one column per model kind.
/// Missing cells are written as `NA`.
pub fn table_csv(summaries: &[GroupSummary], mode: Mode, cases: &[OrderCase]) -> String {
    let mut s = String::from("case,dataset");
    for k in ModelKind::ALL {
        let _ = write!(s, ",{k}");
    }
    s.push('\n');
    for &case in cases {
        for (role, label) in TABLE_ROLES {
            let _ = write!(s, "{case},{label}");
            for k in ModelKind::ALL {
                match find_summary(summaries, k, case, role, mode) {
                    Some(g) => {
                        let _ = write!(s, ",{:.6}", g.median);
                    }
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
    }
    s
}

/// Boxplot data: every group with its five-number summary.
pub fn quantiles_csv(summaries: &[GroupSummary]) -> String {
    let mut s = String::from("model,case,dataset,mode,n,min,q1,median,q3,max\n");
    for g in summaries {
        let k = g.key;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            k.model_kind, k.order_case, k.dataset_role, k.mode, g.n, g.min, g.q1, g.median, g.q3, g.max
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Activation};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Just, Strategy};

    fn rec(kind: ModelKind, case: OrderCase, v: f64) -> MetricRecord {
        MetricRecord {
            run: 0,
            model_kind: kind,
            order_case: case,
            dataset_role: Role::WhiteTest,
            mode: Mode::Simulation,
            nrmse: v,
        }
    }

    #[test]
    fn nrmse_cases() {
        let y = [1.0, 3.0, -2.0, 0.5];
        assert_eq!(nrmse(&y, &y).unwrap(), 0.0);
        let m = y.iter().sum::<f64>() / 4.0;
        assert!((nrmse(&y, &[m; 4]).unwrap() - 1.0).abs() < 1e-15);
        assert!((nrmse(&[0.0, 2.0], &[0.0, 0.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        // variance denominator: sqrt(2) / 1
        assert!((nrmse_with(&[0.0, 2.0], &[0.0, 0.0], Denominator::Variance).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((nrmse_with(&[0.0, 4.0], &[0.0, 0.0], Denominator::Variance).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(nrmse(&[1.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(nrmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn summaries() {
        let one = summarize(&[rec(ModelKind::Dr, OrderCase::Hmo, 0.4)]);
        assert_eq!((one[0].median, one[0].q1, one[0].q3), (0.4, 0.4, 0.4));

        let recs: Vec<_> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| rec(ModelKind::Es, OrderCase::Hmo, v)).collect();
        let s = summarize(&recs);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].median, 2.5);
        assert_eq!(s[0].q1, 1.75);
        assert_eq!(s[0].q3, 3.25);
        assert_eq!((s[0].min, s[0].max), (1.0, 4.0));

        let odd: Vec<_> = [0.05, 0.02, 0.03].iter().map(|&v| rec(ModelKind::Es, OrderCase::Hmo, v)).collect();
        assert_eq!(summarize(&odd)[0].median, 0.03);
    }

    #[test]
    fn groups_are_independent() {
        let mut recs: Vec<_> = [1.0, 2.0, 5.0].iter().map(|&v| rec(ModelKind::Es, OrderCase::Hmo, v)).collect();
        let before = summarize(&recs)[0];
        recs.push(rec(ModelKind::Es, OrderCase::Omo, 100.0));
        let after = summarize(&recs);
        assert_eq!(find_summary(&after, ModelKind::Es, OrderCase::Hmo, Role::WhiteTest, Mode::Simulation), Some(&before));
        assert_eq!(after.len(), 2);
    }

    #[test]
    fn table_layout() {
        let recs = vec![rec(ModelKind::Dr, OrderCase::Hmo, 0.05), rec(ModelKind::Lti, OrderCase::Hmo, 0.7)];
        let t = table_csv(&summarize(&recs), Mode::Simulation, &[OrderCase::Hmo, OrderCase::Omo]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "case,dataset,LTI,ES,DR,NOE");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[1], "HMO,Training,NA,NA,NA,NA");
        assert_eq!(lines[2], "HMO,White Test,0.700000,NA,0.050000,NA");
        assert_eq!(lines[4], "OMO,Training,NA,NA,NA,NA");
    }

    fn passthrough(n_b: usize, n_a: usize) -> MlpParams {
        let mut p = MlpParams::zeros(NarxConfig::new(n_b, n_a, 1).unwrap().with_activation(Activation::Identity));
        p.w1_u[[0, 0]] = 1.0;
        p.w2[[0, 0]] = 1.0;
        p
    }

    #[test]
    fn profiles() {
        let u: Vec<f64> = (0..40).map(|t| (t as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..40).map(|t| (t as f64 * 0.3).cos()).collect();
        let zero = MlpParams::zeros(NarxConfig::new(2, 2, 3).unwrap());
        assert!(decay_profile(&zero, &u, &y, 6).unwrap().iter().all(|v| *v == 0.0));
        let prof = decay_profile(&passthrough(2, 2), &u, &y, 6).unwrap();
        assert_eq!(prof, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(decay_profile(&zero, &u[..5], &y[..5], 6).is_err());
        assert!(profile_csv(&prof).starts_with("k,mean_abs_sensitivity\n0,1\n1,0\n"));
    }

    #[test]
    fn slope_of_geometric_profile() {
        let p: Vec<f64> = (0..40).map(|k| 0.8f64.powi(k)).collect();
        assert!((log_slope(&p, 5, 30).unwrap() - 0.8f64.ln()).abs() < 1e-6);
        assert!(log_slope(&p, 5, 40).is_err());
    }

    #[test]
    fn model_scoring_and_files() {
        let u: Vec<f64> = (0..50).map(|t| (t as f64 * 0.9).sin()).collect();
        let p = passthrough(3, 2);
        let m = Model::Narx(p.clone());
        assert_eq!(m.first_index(), 3);
        for mode in [Mode::OneStep, Mode::Simulation] {
            assert_eq!(m.predict(mode, &u, &u, 5).unwrap(), u[5..].to_vec());
            assert_eq!(m.nrmse(mode, &u, &u, 3).unwrap(), 0.0);
        }
        assert!(m.predict(Mode::OneStep, &u, &u, 2).is_err());
        let fir = Model::Fir(FirModel::new(vec![1.0]).unwrap());
        assert_eq!(fir.nrmse(Mode::Simulation, &u, &u, 0).unwrap(), 0.0);
        for model in [m, fir, Model::Narx(init_params(NarxConfig::new(2, 2, 3).unwrap(), 1))] {
            assert_eq!(Model::from_json(&model.to_json().unwrap()).unwrap(), model);
        }
    }

    proptest! {
        #[test]
        fn nrmse_scale_invariant(
            y in proptest::collection::vec(-5.0f64..5.0, 3..30),
            a in (0.1f64..10.0).prop_flat_map(|v| proptest::prop_oneof![Just(v), Just(-v)]),
            shift in -1.0f64..1.0,
        ) {
            let y_hat: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + shift * (i as f64).sin()).collect();
            if let Ok(base) = nrmse(&y, &y_hat) {
                let ys: Vec<f64> = y.iter().map(|v| a * v).collect();
                let hs: Vec<f64> = y_hat.iter().map(|v| a * v).collect();
                let scaled = nrmse(&ys, &hs).unwrap();
                prop_assert!((scaled - base).abs() <= 1e-9 * base.max(1e-12));
            }
        }

        #[test]
        fn summarize_is_permutation_invariant(vals in proptest::collection::vec(0.0f64..1.0, 1..20), rot in 0usize..20) {
            let recs: Vec<_> = vals.iter().enumerate().map(|(i, &v)| {
                let kind = ModelKind::ALL[i % 4];
                rec(kind, OrderCase::Hmo, v)
            }).collect();
            let mut shuffled = recs.clone();
            shuffled.rotate_left(rot % recs.len());
            shuffled.reverse();
            prop_assert_eq!(summarize(&recs), summarize(&shuffled));
        }
    }
}
