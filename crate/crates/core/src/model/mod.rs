//! The recurrent network: configuration, parameters, forward and backward
//! passes, activation export and checkpoints.

pub mod activations;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use activations::{export_mean_activations, ActivationSite};
pub use checkpoint::{Checkpoint, TrainingState};
pub use config::{ConvMode, DownsampleSchedule, ThriftyConfig};
pub use forward::{
    backward, forward, forward_residual, forward_thrifty, predict, ActivationSums, Forward,
    Gradients,
};
pub use params::{init_params, AlphaMatrix, ConvWeights, ParamGroup, ParamId, Params};
