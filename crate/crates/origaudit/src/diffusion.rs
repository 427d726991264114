//! A miniature latent text-to-image diffusion stack trained from scratch:
//! convolutional VAE, transformer text encoder with an extendable embedding
//! table, a conditional UNet denoiser over latents, a DDPM noise schedule
//! with a deterministic DDIM sampler, and the two-stage training loops.

mod bundle;
mod sample;
mod schedule;
mod text;
mod train;
mod unet;
mod vae;

pub use bundle::{BundleMeta, ModelBundle, StackConfig};
pub use sample::{sample, sample_batch, sample_latents, ConditioningSource, SampleConfig};
pub use schedule::NoiseSchedule;
pub use text::{TextEncoder, TextEncoderConfig, Tokenizer, BOS_ID, PAD_ID};
pub use train::{
    load_dataset, train_autoencoder, train_denoiser, LoadedDataset, TrainCurve,
    TrainUnetConfig, TrainVaeConfig,
};
pub use unet::{UNet, UNetConfig};
pub use vae::{ConvVae, VaeConfig};
