//! Convolutional slice autoencoder: layers, optimizer, training and checkpoints.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod layers;
mod model;
mod tensor;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use model::{build_model, BnStats, Forward, Grads, LayerSpec, ModelParams};
pub use tensor::Tensor4;
pub use train::{
    averaged_dwi_dataset, slices_from_volume, slices_from_volume_with, sweep_latent_maps, train, EpochLog, SliceDataset,
    SplitMode, TrainConfig, TrainOutcome, MIN_MASK_FRACTION,
};

use crate::error::{Error, Result};
use crate::volume::NormMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Nearest,
    TransposedConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub latent_maps: usize,
    /// Side length of the square network input; a multiple of 16.
    pub input_size: usize,
    /// Divides every hidden layer width; 1 gives the full network.
    pub width_divisor: usize,
    pub upsample: Upsample,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Slice intensity normalization used in training and inference.
    #[serde(default)]
    pub norm: NormMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_channels: usize, latent_maps: usize) -> Self {
        ModelConfig {
            input_channels,
            latent_maps,
            input_size: 128,
            width_divisor: 1,
            upsample: Upsample::Nearest,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
            norm: NormMode::PerChannel,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.input_channels == 0 || self.latent_maps == 0 {
            return bad("channel and latent map counts must be positive");
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return bad("input size must be a positive multiple of 16");
        }
        if self.width_divisor == 0 {
            return bad("width divisor must be positive");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("batch-norm momentum must lie in [0, 1) and epsilon be positive");
        }
        Ok(())
    }
}
