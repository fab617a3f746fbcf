//! A synthetic segmentation task whose labels depend on a colored frame far
//! from the pixels being labeled, together with a small encoder / LGA /
//! decoder network, an Adam trainer and ablation sweeps.
//!
//! Everything runs on the CPU in `f64` and is deterministic for a given seed.

pub mod ablate;
pub mod adam;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod train;

pub use ablate::{ablate, AblationAxis, AblationRow};
pub use data::{generate_dataset, generate_sample, DatasetConfig, SyntheticSample};
pub use error::{ToyError, ToyResult};
pub use model::{ModelConfig, ToyModel};
pub use train::{train, EpochMetrics, TrainConfig, TrainOutcome, TrainOutputs};
