//! Network, differentiation tape, optimizer and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;

pub use config::ModelConfig;
pub use model::{init_params, FeatureGrid, FeatureSet, NetInputs, RemakeNet, Variant, VariantInputs};
pub use params::{ModelParams, ParamGrads, Tensor};
