pub mod attacks;
pub mod config_predictor;
pub mod cost_meter;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod models;
pub mod robust_train;
pub mod scaling_laws;
pub mod tensor;

pub use attacks::AttackConfig;
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use models::{Activation, ArchSpec, Family, Model};
pub use robust_train::{LossKind, RunRecord, TrainConfig};
pub use tensor::{FlopTally, Tensor};
