//! Conditional UNet denoiser over latents: residual blocks with timestep
//! conditioning and cross-attention to the text-encoder sequence at every
//! resolution.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nn::{
    sinusoidal_embedding, Attention, Conv2d, Graph, GroupNorm, LayerNorm, Linear, Param, Var,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Width of the text conditioning sequence.
    pub ctx_dim: usize,
    pub temb_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            latent_channels: 4,
            base_channels: 32,
            ctx_dim: 48,
            temb_dim: 64,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels % self.norm_groups != 0 {
            return Err(Error::InvalidConfig(
                "base_channels must divide into norm groups".into(),
            ));
        }
        if self.temb_dim % 2 != 0 {
            return Err(Error::InvalidConfig("temb_dim must be even".into()));
        }
        Ok(())
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
        groups: usize,
        rng: &mut impl rand::Rng,
    ) -> ResBlock {
        ResBlock {
            norm1: GroupNorm::new(&format!("{name}.norm1"), c_in, groups),
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng),
            temb_proj: Linear::new(&format!("{name}.temb"), temb_dim, c_out, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), c_out, groups),
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
            skip: (c_in != c_out)
                .then(|| Conv2d::new(&format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng)),
        }
    }

    fn params(&self) -> Vec<Param> {
        let mut p = [
            self.norm1.params(),
            self.conv1.params(),
            self.temb_proj.params(),
            self.norm2.params(),
            self.conv2.params(),
        ]
        .concat();
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }

    fn forward(&self, g: &Graph, x: &Var, temb: &Var, frozen: bool) -> Var {
        let h = self.conv1.forward(g, &self.norm1.forward(g, x, frozen).silu(), frozen);
        let cond = self.temb_proj.forward(g, temb, frozen);
        let h = h.add_chan_map(&cond);
        let h = self.conv2.forward(g, &self.norm2.forward(g, &h, frozen).silu(), frozen);
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, x, frozen),
            None => x.clone(),
        };
        skip.add(&h)
    }
}

struct CrossAttnBlock {
    ln: LayerNorm,
    attn: Attention,
}

impl CrossAttnBlock {
    fn new(name: &str, channels: usize, ctx_dim: usize, rng: &mut impl rand::Rng) -> Self {
        CrossAttnBlock {
            ln: LayerNorm::new(&format!("{name}.ln"), channels),
            attn: Attention::new(&format!("{name}.attn"), channels, ctx_dim, rng),
        }
    }

    fn params(&self) -> Vec<Param> {
        [self.ln.params(), self.attn.params()].concat()
    }

    fn forward(&self, g: &Graph, x: &Var, ctx: &Var, mask: &ArrayD<f64>, frozen: bool) -> Var {
        let s = x.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let flat = x.reshape(&[b, c, h * w]).transpose_last2(); // [B, HW, C]
        let normed = self.ln.forward(g, &flat, frozen);
        let attended = self.attn.forward(g, &normed, ctx, Some(mask), frozen);
        let out = flat.add(&attended);
        out.transpose_last2().reshape(&[b, c, h, w])
    }
}

/// Noise-prediction network; input and output share the latent shape.
pub struct UNet {
    pub cfg: UNetConfig,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    down_res: ResBlock,
    down_attn: CrossAttnBlock,
    down_conv: Conv2d,
    mid_res1: ResBlock,
    mid_attn: CrossAttnBlock,
    mid_res2: ResBlock,
    up_conv: Conv2d,
    up_res: ResBlock,
    up_attn: CrossAttnBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(cfg: UNetConfig, seed: u64) -> UNet {
        let mut rng = crate::indexed_rng(seed, 1);
        let c = cfg.base_channels;
        let lc = cfg.latent_channels;
        let td = cfg.temb_dim;
        let gr = cfg.norm_groups;
        UNet {
            cfg,
            temb1: Linear::new("unet.temb1", td, td, &mut rng),
            temb2: Linear::new("unet.temb2", td, td, &mut rng),
            conv_in: Conv2d::new("unet.conv_in", lc, c, 3, 1, 1, &mut rng),
            down_res: ResBlock::new("unet.down_res", c, c, td, gr, &mut rng),
            down_attn: CrossAttnBlock::new("unet.down_attn", c, cfg.ctx_dim, &mut rng),
            down_conv: Conv2d::new("unet.down_conv", c, 2 * c, 3, 2, 1, &mut rng),
            mid_res1: ResBlock::new("unet.mid_res1", 2 * c, 2 * c, td, gr, &mut rng),
            mid_attn: CrossAttnBlock::new("unet.mid_attn", 2 * c, cfg.ctx_dim, &mut rng),
            mid_res2: ResBlock::new("unet.mid_res2", 2 * c, 2 * c, td, gr, &mut rng),
            up_conv: Conv2d::new("unet.up_conv", 2 * c, c, 3, 1, 1, &mut rng),
            up_res: ResBlock::new("unet.up_res", 2 * c, c, td, gr, &mut rng),
            up_attn: CrossAttnBlock::new("unet.up_attn", c, cfg.ctx_dim, &mut rng),
            norm_out: GroupNorm::new("unet.norm_out", c, gr, ),
            conv_out: Conv2d::new("unet.conv_out", c, lc, 3, 1, 1, &mut rng),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        [
            self.temb1.params(),
            self.temb2.params(),
            self.conv_in.params(),
            self.down_res.params(),
            self.down_attn.params(),
            self.down_conv.params(),
            self.mid_res1.params(),
            self.mid_attn.params(),
            self.mid_res2.params(),
            self.up_conv.params(),
            self.up_res.params(),
            self.up_attn.params(),
            self.norm_out.params(),
            self.conv_out.params(),
        ]
        .concat()
    }

    /// Predicts the injected noise for noised latents `z_t` at integer
    /// timesteps `t`, conditioned on the text sequence `ctx`.
    pub fn forward(
        &self,
        g: &Graph,
        z_t: &Var,
        timesteps: &[usize],
        ctx: &Var,
        ctx_mask: &ArrayD<f64>,
        frozen: bool,
    ) -> Var {
        let ts: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let sin = Var::input(sinusoidal_embedding(&ts, self.cfg.temb_dim).into_dyn());
        let temb = self.temb2.forward(g, &self.temb1.forward(g, &sin, frozen).silu(), frozen);

        let x0 = self.conv_in.forward(g, z_t, frozen);
        let h1 = self.down_res.forward(g, &x0, &temb, frozen);
        let h1 = self.down_attn.forward(g, &h1, ctx, ctx_mask, frozen);
        let h2 = self.down_conv.forward(g, &h1, frozen);
        let m = self.mid_res1.forward(g, &h2, &temb, frozen);
        let m = self.mid_attn.forward(g, &m, ctx, ctx_mask, frozen);
        let m = self.mid_res2.forward(g, &m, &temb, frozen);
        let u = self.up_conv.forward(g, &m.upsample2x(), frozen);
        let cat = Var::concat(1, &[&u, &h1]);
        let o = self.up_res.forward(g, &cat, &temb, frozen);
        let o = self.up_attn.forward(g, &o, ctx, ctx_mask, frozen);
        self.conv_out.forward(g, &self.norm_out.forward(g, &o, frozen).silu(), frozen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::text::{TextEncoder, TextEncoderConfig, Tokenizer};
    use ndarray::IxDyn;

    #[test]
    fn output_shape_matches_input_for_both_canvases() {
        let cfg = UNetConfig { base_channels: 16, ctx_dim: 16, ..UNetConfig::default() };
        cfg.validate().unwrap();
        let unet = UNet::new(cfg, 2);
        let tok = Tokenizer::caption_grammar();
        let enc = TextEncoder::new(
            tok.clone(),
            TextEncoderConfig { width: 16, layers: 1, max_len: 8, mlp_mult: 2 },
            2,
        );
        let g = Graph::new();
        let ids = vec![tok.tokenize("big red full circle", 8).unwrap(); 2];
        let ctx = enc.forward(&g, &ids, None, true);
        let mask = TextEncoder::key_mask(&ids);
        for hw in [4usize, 8] {
            let z = Var::input(ArrayD::zeros(IxDyn(&[2, 4, hw, hw])));
            let out = unet.forward(&g, &z, &[10, 500], &ctx, &mask, true);
            assert_eq!(out.shape(), &[2, 4, hw, hw]);
        }
    }
}
