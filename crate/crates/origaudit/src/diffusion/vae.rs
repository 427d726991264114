//! Convolutional VAE with 8x spatial compression into a 4-channel latent.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, Graph, GroupNorm, Param, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub canvas_px: u32,
    /// Channel widths of the three resolution stages.
    pub channels: [usize; 3],
    pub latent_channels: usize,
    pub norm_groups: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { canvas_px: 32, channels: [16, 32, 64], latent_channels: 4, norm_groups: 8 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_px % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "canvas {} must be a multiple of 8",
                self.canvas_px
            )));
        }
        for c in self.channels {
            if c % self.norm_groups != 0 {
                return Err(Error::InvalidConfig(format!(
                    "channel width {c} must divide into {} norm groups",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn latent_hw(&self) -> usize {
        self.canvas_px as usize / 8
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_hw(), self.latent_hw()]
    }
}

struct NormConv {
    norm: GroupNorm,
    conv: Conv2d,
}

impl NormConv {
    fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        groups: usize,
        rng: &mut impl rand::Rng,
    ) -> NormConv {
        NormConv {
            norm: GroupNorm::new(&format!("{name}.norm"), c_in, groups),
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, 3, stride, 1, rng),
        }
    }

    fn params(&self) -> Vec<Param> {
        [self.norm.params(), self.conv.params()].concat()
    }

    fn forward(&self, g: &Graph, x: &Var, frozen: bool) -> Var {
        self.conv.forward(g, &self.norm.forward(g, x, frozen).silu(), frozen)
    }
}

/// Encoder: 3 stride-2 stages down to `(latent, canvas/8, canvas/8)`;
/// decoder mirrors with nearest-neighbor upsampling. `encode` returns
/// `(mu, logvar)`; evaluation-mode encoding is the deterministic `mu`.
pub struct ConvVae {
    pub cfg: VaeConfig,
    enc_in: Conv2d,
    enc1: NormConv,
    enc2: NormConv,
    enc3: NormConv,
    enc_out: NormConv,
    dec_in: Conv2d,
    dec1: NormConv,
    dec2: NormConv,
    dec3: NormConv,
    dec_out: NormConv,
}

impl ConvVae {
    pub fn new(cfg: VaeConfig, seed: u64) -> ConvVae {
        let mut rng = crate::indexed_rng(seed, 0);
        let [c0, c1, c2] = cfg.channels;
        let gr = cfg.norm_groups;
        let lc = cfg.latent_channels;
        ConvVae {
            cfg,
            enc_in: Conv2d::new("vae.enc_in", 3, c0, 3, 1, 1, &mut rng),
            enc1: NormConv::new("vae.enc1", c0, c1, 2, gr, &mut rng),
            enc2: NormConv::new("vae.enc2", c1, c2, 2, gr, &mut rng),
            enc3: NormConv::new("vae.enc3", c2, c2, 2, gr, &mut rng),
            enc_out: NormConv::new("vae.enc_out", c2, 2 * lc, 1, gr, &mut rng),
            dec_in: Conv2d::new("vae.dec_in", lc, c2, 3, 1, 1, &mut rng),
            dec1: NormConv::new("vae.dec1", c2, c2, 1, gr, &mut rng),
            dec2: NormConv::new("vae.dec2", c2, c1, 1, gr, &mut rng),
            dec3: NormConv::new("vae.dec3", c1, c0, 1, gr, &mut rng),
            dec_out: NormConv::new("vae.dec_out", c0, 3, 1, gr, &mut rng),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        [
            self.enc_in.params(),
            self.enc1.params(),
            self.enc2.params(),
            self.enc3.params(),
            self.enc_out.params(),
            self.dec_in.params(),
            self.dec1.params(),
            self.dec2.params(),
            self.dec3.params(),
            self.dec_out.params(),
        ]
        .concat()
    }

    /// `[B,3,H,W] -> ([B,latent,h,w], [B,latent,h,w])`.
    pub fn encode(&self, g: &Graph, x: &Var, frozen: bool) -> (Var, Var) {
        let h = self.enc_in.forward(g, x, frozen);
        let h = self.enc1.forward(g, &h, frozen);
        let h = self.enc2.forward(g, &h, frozen);
        let h = self.enc3.forward(g, &h, frozen);
        let out = self.enc_out.forward(g, &h, frozen);
        let lc = self.cfg.latent_channels;
        (out.narrow(1, 0, lc), out.narrow(1, lc, lc))
    }

    /// `[B,latent,h,w] -> [B,3,H,W]` (linear output, clamp at the image
    /// boundary).
    pub fn decode(&self, g: &Graph, z: &Var, frozen: bool) -> Var {
        let h = self.dec_in.forward(g, z, frozen);
        let h = self.dec1.forward(g, &h, frozen).upsample2x();
        let h = self.dec2.forward(g, &h, frozen).upsample2x();
        let h = self.dec3.forward(g, &h, frozen).upsample2x();
        self.dec_out.forward(g, &h, frozen)
    }

    /// Deterministic evaluation-mode encode: the posterior mean.
    pub fn encode_mean(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let g = Graph::new();
        let (mu, _) = self.encode(&g, &Var::input(x.clone()), true);
        mu.value().clone()
    }

    pub fn decode_array(&self, z: &ArrayD<f64>) -> ArrayD<f64> {
        let g = Graph::new();
        self.decode(&g, &Var::input(z.clone()), true).value().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn shapes_compress_8x_and_round_trip() {
        for canvas in [32u32, 64] {
            let cfg = VaeConfig { canvas_px: canvas, ..VaeConfig::default() };
            cfg.validate().unwrap();
            let vae = ConvVae::new(cfg, 1);
            let x = ArrayD::zeros(IxDyn(&[2, 3, canvas as usize, canvas as usize]));
            let g = Graph::new();
            let (mu, logvar) = vae.encode(&g, &Var::input(x), true);
            let hw = cfg.latent_hw();
            assert_eq!(mu.shape(), &[2, 4, hw, hw]);
            assert_eq!(logvar.shape(), &[2, 4, hw, hw]);
            let x2 = vae.decode(&g, &mu, true);
            assert_eq!(x2.shape(), &[2, 3, canvas as usize, canvas as usize]);
        }
    }

    #[test]
    fn encode_mean_is_deterministic() {
        let vae = ConvVae::new(VaeConfig::default(), 7);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 3, 32, 32]), |ix| {
            ((ix.slice()[2] * 7 + ix.slice()[3]) % 11) as f64 / 11.0
        });
        assert_eq!(vae.encode_mean(&x), vae.encode_mean(&x));
    }

    #[test]
    fn invalid_canvas_is_rejected() {
        let cfg = VaeConfig { canvas_px: 30, ..VaeConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
