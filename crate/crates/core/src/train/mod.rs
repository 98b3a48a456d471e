//! SGD training, the α double-well penalty and the shortcut-freezing
//! ablation.

pub mod ablation;
pub mod config;
pub mod optim;
pub mod trainer;

pub use ablation::{ablation_alpha, AblationConfig, AblationReport, VariantResult};
pub use config::{AlphaRegConfig, TrainConfig};
pub use optim::{alpha_reg_loss, alpha_well_distance, binarize_alpha, AlphaRegState, Sgd};
pub use trainer::{evaluate, train, TrainOptions, TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};
