//! The full network: configuration, parameters, forward pass and training.

mod check;
mod config;
mod forward;
mod train;
mod weights;

pub use check::{gradcheck_config, gradcheck_model, ModelGradCheck};
pub use config::{ModelConfig, Preset};
pub use forward::{ccm_forward, lhs_block_forward, model_forward, upscale, upscale_parallel, ParamVars};
pub use train::{cosine_lr, synthetic_image, toy_config, toy_pair, train_toy, Adam, TrainOptions, TrainResult};
pub use weights::{
    init_weights, load_weights, param_layout, save_weights, weights_from_bytes, weights_to_bytes, Init, ParamSpec,
    WeightStore,
};
