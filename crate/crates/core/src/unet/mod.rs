//! U-Net refinement network: encoder-decoder with skip connections mapping
//! `[elevation, rough estimate]` tiles to normalized path gain.
//!
//! Each encoder stage is two 3x3 convolutions with ReLU followed by a 2x2
//! max-pool; the decoder mirrors it with nearest-neighbour upsampling, a
//! 3x3 convolution, concatenation with the matching encoder output and two
//! more 3x3 convolutions. A 1x1 convolution and a sigmoid form the head.
//! Inputs are reflect-padded to a multiple of `2^depth` and the output is
//! cropped back.

mod io;
mod net;
mod ops;
mod train;

pub use io::{decode_params, encode_params, load_params, save_params, MODEL_MAGIC, MODEL_VERSION};
pub use net::{
    backward, backward_scaled, forward, loss_masked_mse, ConvSpec, ModelMeta, ModelParams, ParamArray,
    UNetConfig, INPUT_STATS, TARGET_MEAN,
};
pub use ops::Real;
pub use train::{
    evaluate_loss, predict, predict_sample, train, train_from, EpochStats, Prediction, TrainConfig,
    TrainOutcome,
};
