use std::path::{Path, PathBuf};

use narx_core::bench::DataSpec;
use narx_core::train::{AdamConfig, CaseSpec, EsCriterion, ExperimentSpec};
use narx_core::{ModelKind, NarxConfig, OrderCase};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Experiment scale presets for `reproduce`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

/// Settings shared by all subcommands. Every field is optional: unset fields
/// fall back to the preset of the selected scale (`full` outside `reproduce`),
/// so the constants live in exactly one place.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub order_case: Option<OrderCase>,
    /// Explicit orders; any of these switches the case to `CUSTOM`, starting
    /// from the preset of `order_case` (HMO if unset).
    pub hidden: Option<usize>,
    pub n_a: Option<usize>,
    pub n_b: Option<usize>,
    pub model_kind: Option<ModelKind>,
    pub seed: u64,
    pub runs: Option<usize>,
    pub alpha_grid: Option<Vec<f64>>,
    pub gamma_grid: Option<Vec<f64>>,
    pub horizon: Option<usize>,
    pub anchor_stride: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub es_criterion: Option<EsCriterion>,
    pub adam: Option<AdamConfig>,
    pub data: Option<DataSpec>,
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn has_explicit_orders(&self) -> bool {
        self.hidden.is_some() || self.n_a.is_some() || self.n_b.is_some()
    }

    /// The order case and network shape this config selects.
    pub fn case_spec(&self) -> Result<CaseSpec, CliError> {
        let named = match self.order_case {
            Some(OrderCase::Custom) | None => OrderCase::Hmo,
            Some(c) => c,
        };
        if self.order_case == Some(OrderCase::Custom) && !self.has_explicit_orders() {
            return Err(CliError::Usage("order_case CUSTOM needs hidden, n_a and n_b".into()));
        }
        let preset = named.preset().expect("named case has a preset");
        if !self.has_explicit_orders() {
            return Ok(CaseSpec {
                case: named,
                config: preset,
            });
        }
        let config = NarxConfig::new(
            self.n_b.unwrap_or(preset.n_b),
            self.n_a.unwrap_or(preset.n_a),
            self.hidden.unwrap_or(preset.hidden),
        )?;
        Ok(CaseSpec {
            case: if config == preset { named } else { OrderCase::Custom },
            config,
        })
    }

    pub fn model_kind(&self) -> ModelKind {
        self.model_kind.unwrap_or(ModelKind::Dr)
    }

    /// Early-stopping criterion: NOE validates on simulation error, the rest
    /// on one-step error, unless overridden.
    pub fn es_criterion(&self, kind: ModelKind) -> EsCriterion {
        self.es_criterion.unwrap_or(match kind {
            ModelKind::Noe => EsCriterion::SimulationVal,
            _ => EsCriterion::PredictionVal,
        })
    }

    pub fn data_spec(&self) -> DataSpec {
        self.data.clone().unwrap_or_default()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Resolves the experiment protocol: preset of `scale` with this config's
    /// fields layered on top. Cases and models are restricted only when the
    /// config names them.
    pub fn experiment_spec(&self, scale: Scale) -> Result<ExperimentSpec, CliError> {
        let mut spec = match scale {
            Scale::Desk => ExperimentSpec::desk(self.seed),
            Scale::Full => ExperimentSpec::full(self.seed),
        };
        if self.order_case.is_some() || self.has_explicit_orders() {
            spec.cases = vec![self.case_spec()?];
        }
        if let Some(k) = self.model_kind {
            spec.models = vec![k];
        }
        macro_rules! layer {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { spec.$f = v.clone(); } )* };
        }
        layer!(alpha_grid, gamma_grid, horizon, anchor_stride, max_epochs, patience, batch_size, adam, data);
        if let Some(r) = self.runs {
            spec.n_runs = r;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| CliError::Usage(format!("worker pool: {e}")))
    }
}
