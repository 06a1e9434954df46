//! Shared fixtures for the criterion benches.
use narx_core::bench::{generate_experiment, Experiment};
use narx_core::net::init_params;
use narx_core::{MlpParams, OrderCase};

pub const SEED: u64 = 7;

pub fn data() -> Experiment {
    generate_experiment(SEED)
}

/// Freshly initialized network for a preset order case.
pub fn params(case: OrderCase) -> MlpParams {
    init_params(case.preset().expect("preset case"), SEED)
}
