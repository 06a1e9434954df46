//! NARX system identification with a derivative-based regularizer, plus FIR
//! baselines and a Wiener-Hammerstein benchmark harness.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod eval;
pub mod fir;
pub mod narxnet;
pub mod net;
pub mod train;

pub use bench::{Dataset, Role, Signal};
pub use error::{Error, Result};
pub use eval::{MetricRecord, Mode, Model, ModelKind, OrderCase};
pub use fir::{FirModel, KernelConfig, KernelKind};
pub use narxnet::{Objective, RegConfig};
pub use net::{MlpParams, NarxConfig};
pub use train::{TrainReport, TrainSpec};
