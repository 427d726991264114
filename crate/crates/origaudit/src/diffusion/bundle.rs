//! The trained model bundle: autoencoder + denoiser + text encoder +
//! schedule, with a content fingerprint over all frozen weights.
//!
//! Checkpoint layout:
//!
//! ```text
//! model_dir/
//!   autoencoder/weights.bin
//!   denoiser/weights.bin
//!   text/weights.bin
//!   schedule.json
//!   meta.json          # configs, canvas, latent scale, render snapshot
//!   fingerprint.txt
//! ```

use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{fingerprint_hex, load_params, save_params};
use crate::render::RenderConfig;
use crate::{Error, Result};

use super::schedule::NoiseSchedule;
use super::text::{TextEncoder, TextEncoderConfig, Tokenizer};
use super::unet::{UNet, UNetConfig};
use super::vae::{ConvVae, VaeConfig};

/// Architecture + training hyperparameters for the full stack, as read from
/// a TOML config file. Training defaults follow the reference recipe (VAE 8
/// epochs / batch 32 / lr 1e-5; denoiser 15 epochs / batch 64 / lr 6.4e-5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StackConfig {
    #[serde(default)]
    pub vae: VaeConfig,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub text: TextEncoderConfig,
    #[serde(default)]
    pub train_vae: super::train::TrainVaeConfig,
    #[serde(default)]
    pub train_unet: super::train::TrainUnetConfig,
}

impl StackConfig {
    pub fn from_toml(text: &str) -> Result<StackConfig> {
        Ok(toml::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.unet.validate()?;
        if self.unet.ctx_dim != self.text.width {
            return Err(Error::InvalidConfig(format!(
                "unet ctx_dim {} must equal text width {}",
                self.unet.ctx_dim, self.text.width
            )));
        }
        if self.unet.latent_channels != self.vae.latent_channels {
            return Err(Error::InvalidConfig(
                "unet and vae latent channel counts differ".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleMeta {
    pub canvas_px: u32,
    /// Latents are multiplied by this scale before diffusion so their
    /// magnitude is near unit; set after stage-2 training.
    pub latent_scale: f64,
    pub vae_cfg: VaeConfig,
    pub unet_cfg: UNetConfig,
    pub text_cfg: TextEncoderConfig,
    pub tokenizer: Tokenizer,
    /// Render geometry of the training dataset (used by detectors and the
    /// inversion init policy).
    pub render_cfg: RenderConfig,
    pub init_seed: u64,
    /// Set once the corresponding training stage has completed.
    pub vae_trained: bool,
    pub unet_trained: bool,
}

/// The full stack. Immutable once trained; inversion never mutates it.
pub struct ModelBundle {
    pub vae: ConvVae,
    pub unet: UNet,
    pub text: TextEncoder,
    pub schedule: NoiseSchedule,
    pub meta: BundleMeta,
}

impl ModelBundle {
    pub fn init(
        cfg: &StackConfig,
        render_cfg: RenderConfig,
        schedule: NoiseSchedule,
        seed: u64,
    ) -> Result<ModelBundle> {
        cfg.validate()?;
        let tokenizer = Tokenizer::caption_grammar();
        Ok(ModelBundle {
            vae: ConvVae::new(cfg.vae, seed ^ 0x1),
            unet: UNet::new(cfg.unet, seed ^ 0x2),
            text: TextEncoder::new(tokenizer.clone(), cfg.text, seed ^ 0x3),
            schedule,
            meta: BundleMeta {
                canvas_px: cfg.vae.canvas_px,
                latent_scale: 1.0,
                vae_cfg: cfg.vae,
                unet_cfg: cfg.unet,
                text_cfg: cfg.text,
                tokenizer,
                render_cfg,
                init_seed: seed,
                vae_trained: false,
                unet_trained: false,
            },
        })
    }

    /// Content hash of all frozen weights (autoencoder, denoiser, text).
    pub fn fingerprint(&self) -> String {
        fingerprint_hex(&[&self.vae.params(), &self.unet.params(), &self.text.params()])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&dir.join("autoencoder/weights.bin"), &self.vae.params())?;
        save_params(&dir.join("denoiser/weights.bin"), &self.unet.params())?;
        save_params(&dir.join("text/weights.bin"), &self.text.params())?;
        fs::write(
            dir.join("schedule.json"),
            serde_json::to_string_pretty(&self.schedule)?,
        )
        .map_err(|e| Error::io(dir, e))?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)
            .map_err(|e| Error::io(dir, e))?;
        fs::write(dir.join("fingerprint.txt"), format!("{}\n", self.fingerprint()))
            .map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelBundle> {
        let meta_path = dir.join("meta.json");
        let meta: BundleMeta = serde_json::from_str(
            &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        let schedule_path = dir.join("schedule.json");
        let schedule: NoiseSchedule = serde_json::from_str(
            &fs::read_to_string(&schedule_path).map_err(|e| Error::io(&schedule_path, e))?,
        )?;
        let mut bundle = ModelBundle {
            vae: ConvVae::new(meta.vae_cfg, meta.init_seed ^ 0x1),
            unet: UNet::new(meta.unet_cfg, meta.init_seed ^ 0x2),
            text: TextEncoder::new(meta.tokenizer.clone(), meta.text_cfg, meta.init_seed ^ 0x3),
            schedule,
            meta,
        };
        load_params(&dir.join("autoencoder/weights.bin"), &bundle.vae.params())?;
        load_params(&dir.join("denoiser/weights.bin"), &bundle.unet.params())?;
        load_params(&dir.join("text/weights.bin"), &bundle.text.params())?;
        let stored = fs::read_to_string(dir.join("fingerprint.txt"))
            .map_err(|e| Error::io(dir, e))?;
        let recomputed = bundle.fingerprint();
        if stored.trim() != recomputed {
            return Err(Error::CheckpointFormat(format!(
                "{}: fingerprint mismatch (stored {}, weights hash to {recomputed})",
                dir.display(),
                stored.trim()
            )));
        }
        Ok(bundle)
    }

    /// Image (u8 RGB) to a `[1,3,H,W]` float array in `[0,1]`.
    pub fn image_to_array(img: &RgbImage) -> ArrayD<f64> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Array4::<f64>::zeros((1, 3, h, w));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32).0;
                for c in 0..3 {
                    out[[0, c, y, x]] = px[c] as f64 / 255.0;
                }
            }
        }
        out.into_dyn()
    }

    /// `[B,3,H,W]` floats to images, clamped to `[0,1]`.
    pub fn arrays_to_images(batch: &ArrayD<f64>) -> Vec<RgbImage> {
        let v = batch.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (b, _, h, w) = v.dim();
        (0..b)
            .map(|i| {
                let mut img = RgbImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        let px = [
                            to_u8(v[[i, 0, y, x]]),
                            to_u8(v[[i, 1, y, x]]),
                            to_u8(v[[i, 2, y, x]]),
                        ];
                        img.put_pixel(x as u32, y as u32, image::Rgb(px));
                    }
                }
                img
            })
            .collect()
    }

    /// Deterministic evaluation-mode encoding into the scaled latent space.
    pub fn encode_image(&self, img: &RgbImage) -> Result<ArrayD<f64>> {
        if img.width() != self.meta.canvas_px || img.height() != self.meta.canvas_px {
            return Err(Error::WrongImageSize {
                got_w: img.width(),
                got_h: img.height(),
                want: self.meta.canvas_px,
            });
        }
        let x = Self::image_to_array(img);
        Ok(self.vae.encode_mean(&x) * self.meta.latent_scale)
    }

    /// Decodes scaled latents `[B,latent,h,w]` back to images.
    pub fn decode_latents(&self, z: &ArrayD<f64>) -> Vec<RgbImage> {
        let raw = z / self.meta.latent_scale;
        let x = self.vae.decode_array(&raw);
        Self::arrays_to_images(&x)
    }

    /// Splits a stacked latent batch into per-image arrays.
    pub fn split_batch(z: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
        (0..z.shape()[0])
            .map(|i| {
                z.index_axis(Axis(0), i)
                    .insert_axis(Axis(0))
                    .as_standard_layout()
                    .to_owned()
            })
            .collect()
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_stack_config() -> StackConfig {
        StackConfig {
            vae: VaeConfig {
                canvas_px: 16,
                channels: [8, 8, 8],
                latent_channels: 2,
                norm_groups: 4,
            },
            unet: UNetConfig {
                latent_channels: 2,
                base_channels: 8,
                ctx_dim: 12,
                temb_dim: 8,
                norm_groups: 4,
            },
            text: TextEncoderConfig { width: 12, layers: 1, max_len: 8, mlp_mult: 2 },
            ..StackConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip_preserves_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_stack_config();
        let bundle = ModelBundle::init(
            &cfg,
            RenderConfig::for_canvas(16),
            NoiseSchedule::linear(100, 1e-4, 0.02, 10).unwrap(),
            99,
        )
        .unwrap();
        let fp = bundle.fingerprint();
        bundle.save(dir.path()).unwrap();
        let loaded = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(loaded.fingerprint(), fp);
        // Loaded weights are bit-identical.
        let a = bundle.vae.params();
        let b = loaded.vae.params();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x.value(), *y.value(), "param {}", x.name());
        }
    }

    #[test]
    fn weight_mutation_changes_fingerprint() {
        let cfg = tiny_stack_config();
        let bundle = ModelBundle::init(
            &cfg,
            RenderConfig::for_canvas(16),
            NoiseSchedule::default(),
            1,
        )
        .unwrap();
        let fp = bundle.fingerprint();
        bundle.unet.params()[0].update_inplace(|v| v[[0usize, 0, 0, 0].as_slice()] += 1e-12);
        assert_ne!(bundle.fingerprint(), fp);
    }

    #[test]
    fn mismatched_ctx_dim_is_rejected() {
        let mut cfg = tiny_stack_config();
        cfg.text.width = 16;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn image_array_round_trip() {
        let mut img = RgbImage::from_pixel(16, 16, image::Rgb([255, 255, 255]));
        img.put_pixel(3, 5, image::Rgb([255, 0, 0]));
        let arr = ModelBundle::image_to_array(&img);
        let back = ModelBundle::arrays_to_images(&arr);
        assert_eq!(back[0], img);
    }
}
