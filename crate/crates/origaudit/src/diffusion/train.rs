//! Two-stage training: the autoencoder first, then the denoiser (with the
//! text encoder trained jointly by default) on frozen-VAE latents.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{Adam, AdamConfig, Graph, Var};
use crate::render::load_manifest;
use crate::{Error, Result};

use super::text::TextEncoder;
use super::unet::UNet;
use super::vae::ConvVae;
use super::NoiseSchedule;

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// A materialized dataset held in memory as u8 pixels (NCHW) plus captions.
pub struct LoadedDataset {
    pixels: Vec<u8>,
    pub captions: Vec<String>,
    pub canvas_px: u32,
    pub len: usize,
}

impl LoadedDataset {
    pub fn image_array(&self, indices: &[usize]) -> Array4<f64> {
        let hw = (self.canvas_px * self.canvas_px) as usize;
        let stride = 3 * hw;
        let mut out = Array4::<f64>::zeros((
            indices.len(),
            3,
            self.canvas_px as usize,
            self.canvas_px as usize,
        ));
        {
            let slice = out.as_slice_mut().unwrap();
            for (bi, &i) in indices.iter().enumerate() {
                let src = &self.pixels[i * stride..(i + 1) * stride];
                let dst = &mut slice[bi * stride..(bi + 1) * stride];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s as f64 / 255.0;
                }
            }
        }
        out
    }
}

/// Loads every image listed in a dataset directory's manifest.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = load_manifest(dir)?;
    let mut canvas_px = 0u32;
    let mut pixels = Vec::new();
    let mut captions = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let img = image::open(dir.join(&entry.file))?.to_rgb8();
        if canvas_px == 0 {
            canvas_px = img.width();
            pixels.reserve(manifest.entries.len() * 3 * (canvas_px * canvas_px) as usize);
        }
        if img.width() != canvas_px || img.height() != canvas_px {
            return Err(Error::WrongImageSize {
                got_w: img.width(),
                got_h: img.height(),
                want: canvas_px,
            });
        }
        // NCHW channel planes.
        for c in 0..3 {
            for y in 0..canvas_px {
                for x in 0..canvas_px {
                    pixels.push(img.get_pixel(x, y).0[c]);
                }
            }
        }
        captions.push(entry.caption.clone());
    }
    if captions.is_empty() {
        return Err(Error::InvalidConfig("dataset manifest is empty".into()));
    }
    Ok(LoadedDataset { pixels, captions, canvas_px, len: manifest.entries.len() })
}

// ---------------------------------------------------------------------------
// Training configs and curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainVaeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    /// Loss weight on non-background pixels (glyphs cover few pixels).
    pub foreground_weight: f64,
    pub holdout_fraction: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainVaeConfig {
    fn default() -> Self {
        // Reference recipe: 8 epochs, effective batch 32, lr 1e-5.
        TrainVaeConfig {
            epochs: 8,
            batch: 32,
            lr: 1e-5,
            kl_weight: 1e-4,
            foreground_weight: 6.0,
            holdout_fraction: 0.05,
            grad_clip: 1.0,
            seed: 101,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainUnetConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Train the text encoder jointly (then freeze) or keep it frozen from
    /// initialization.
    pub freeze_text: bool,
    pub holdout_fraction: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainUnetConfig {
    fn default() -> Self {
        // Reference recipe: 15 epochs, effective batch 64, lr 6.4e-5.
        TrainUnetConfig {
            epochs: 15,
            batch: 64,
            lr: 6.4e-5,
            freeze_text: false,
            holdout_fraction: 0.05,
            grad_clip: 1.0,
            seed: 202,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub holdout_loss: Option<f64>,
}

/// Loss curve, persisted as CSV alongside checkpoints.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainCurve {
    pub rows: Vec<CurveRow>,
}

impl TrainCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,epoch,step,train_loss,holdout_loss\n");
        for r in &self.rows {
            let holdout = r.holdout_loss.map(|v| format!("{v}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.stage, r.epoch, r.step, r.train_loss, holdout
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// First and last holdout losses of a stage, when present.
    pub fn holdout_span(&self, stage: &str) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.stage == stage)
            .filter_map(|r| r.holdout_loss)
            .collect();
        Some((*vals.first()?, *vals.last()?))
    }
}

fn split_holdout(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let every = (1.0 / fraction.clamp(0.01, 0.5)).round() as usize;
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for i in 0..n {
        if i % every == every - 1 {
            holdout.push(i);
        } else {
            train.push(i);
        }
    }
    if holdout.is_empty() {
        holdout.push(0);
    }
    (train, holdout)
}

fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
}

fn persist_curve(curve: &TrainCurve, log_path: Option<&Path>) {
    if let Some(p) = log_path {
        let _ = curve.write_csv(p);
    }
}

// ---------------------------------------------------------------------------
// Stage 1: autoencoder
// ---------------------------------------------------------------------------

/// Trains the VAE in place. The loss is foreground-weighted reconstruction
/// MSE plus a small KL term. Returns the loss curve; the holdout column is
/// plain (unweighted) reconstruction error with deterministic encoding.
pub fn train_autoencoder(
    vae: &ConvVae,
    data: &LoadedDataset,
    cfg: &TrainVaeConfig,
    log_path: Option<&Path>,
) -> Result<TrainCurve> {
    let mut curve = TrainCurve::default();
    let (train_idx, holdout_idx) = split_holdout(data.len, cfg.holdout_fraction);
    let mut rng = crate::indexed_rng(cfg.seed, 0);
    let mut opt = Adam::new(
        vae.params(),
        AdamConfig { lr: cfg.lr, grad_clip: Some(cfg.grad_clip), ..AdamConfig::default() },
    );

    let holdout = vae_holdout_loss(vae, data, &holdout_idx);
    curve.rows.push(CurveRow {
        stage: "vae".into(),
        epoch: 0,
        step: 0,
        train_loss: f64::NAN,
        holdout_loss: Some(holdout),
    });

    let mut order = train_idx.clone();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let x = data.image_array(chunk);
            let weights = foreground_weights(&x, cfg.foreground_weight);
            let g = Graph::new();
            let xv = Var::input(x.into_dyn());
            let (mu, logvar) = vae.encode(&g, &xv, false);
            let eps = ArrayD::from_shape_fn(IxDyn(mu.shape()), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let z = mu.add(&logvar.scale(0.5).exp().mul(&Var::input(eps)));
            let recon = vae.decode(&g, &z, false);
            let diff = recon.sub(&xv);
            let wsum = weights.sum();
            let rec_loss = diff
                .square()
                .mul(&Var::input(weights))
                .sum_all()
                .scale(1.0 / wsum);
            // KL per image, summed over latent dims, averaged over batch.
            let kl = mu
                .square()
                .add(&logvar.exp())
                .sub(&logvar)
                .add_scalar(-1.0)
                .sum_all()
                .scale(0.5 / chunk.len() as f64);
            let loss = rec_loss.add(&kl.scale(cfg.kl_weight));
            let loss_v = loss.value().iter().next().copied().unwrap();
            if !loss_v.is_finite() {
                persist_curve(&curve, log_path);
                return Err(Error::Diverged(format!(
                    "vae loss {loss_v} at epoch {epoch} step {step}"
                )));
            }
            loss.backward();
            opt.step(&g);
            epoch_loss += loss_v;
            batches += 1;
            step += 1;
        }
        let holdout = vae_holdout_loss(vae, data, &holdout_idx);
        curve.rows.push(CurveRow {
            stage: "vae".into(),
            epoch,
            step,
            train_loss: epoch_loss / batches.max(1) as f64,
            holdout_loss: Some(holdout),
        });
        persist_curve(&curve, log_path);
    }
    persist_curve(&curve, log_path);
    Ok(curve)
}

/// 1 everywhere, `fg` on pixels that are visibly non-white in the input.
fn foreground_weights(x: &Array4<f64>, fg: f64) -> ArrayD<f64> {
    let (b, _, h, w) = x.dim();
    let mut out = Array4::<f64>::from_elem((b, 3, h, w), 1.0);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let dist = (0..3)
                    .map(|c| (1.0 - x[[bi, c, y, xx]]).abs())
                    .fold(0.0f64, f64::max);
                if dist > 0.15 {
                    for c in 0..3 {
                        out[[bi, c, y, xx]] = fg;
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// Plain reconstruction MSE with deterministic (mean) encoding.
fn vae_holdout_loss(vae: &ConvVae, data: &LoadedDataset, holdout: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in holdout.chunks(32) {
        let x = data.image_array(chunk).into_dyn();
        let z = vae.encode_mean(&x);
        let recon = vae.decode_array(&z);
        let diff = &recon - &x;
        total += diff.iter().map(|v| v * v).sum::<f64>();
        count += diff.len();
    }
    total / count.max(1) as f64
}

// ---------------------------------------------------------------------------
// Stage 2: denoiser (+ text encoder)
// ---------------------------------------------------------------------------

/// Trains the denoiser (and, unless frozen, the text encoder) on latents
/// from the frozen VAE. Returns the curve and the latent scale
/// (1 / latent std) measured on the training set.
pub fn train_denoiser(
    unet: &UNet,
    text: &TextEncoder,
    vae: &ConvVae,
    schedule: &NoiseSchedule,
    data: &LoadedDataset,
    cfg: &TrainUnetConfig,
    log_path: Option<&Path>,
) -> Result<(TrainCurve, f64)> {
    let mut curve = TrainCurve::default();
    let max_len = text.cfg.max_len;

    // Latents from the frozen VAE, then the unit-scale normalizer.
    let mut latents: Vec<ArrayD<f64>> = Vec::with_capacity(data.len);
    for chunk_start in (0..data.len).step_by(64) {
        let idx: Vec<usize> = (chunk_start..(chunk_start + 64).min(data.len)).collect();
        let z = vae.encode_mean(&data.image_array(&idx).into_dyn());
        for i in 0..idx.len() {
            latents.push(
                z.index_axis(Axis(0), i)
                    .insert_axis(Axis(0))
                    .as_standard_layout()
                    .to_owned(),
            );
        }
    }
    let mut sq = 0.0;
    let mut mean = 0.0;
    let mut n = 0usize;
    for z in &latents {
        sq += z.iter().map(|v| v * v).sum::<f64>();
        mean += z.sum();
        n += z.len();
    }
    let variance = (sq / n as f64) - (mean / n as f64).powi(2);
    let latent_scale = if variance > 1e-12 { 1.0 / variance.sqrt() } else { 1.0 };
    for z in &mut latents {
        z.mapv_inplace(|v| v * latent_scale);
    }

    let ids: Vec<Vec<usize>> = data
        .captions
        .iter()
        .map(|c| text.tokenizer.tokenize(c, max_len))
        .collect::<Result<_>>()?;

    let (train_idx, holdout_idx) = split_holdout(data.len, cfg.holdout_fraction);
    // Fixed (t, eps) draws make holdout losses comparable across epochs.
    let holdout_draws: Vec<(usize, ArrayD<f64>)> = holdout_idx
        .iter()
        .map(|&i| {
            let mut r = crate::indexed_rng(cfg.seed ^ 0xbeef, i as u64);
            let t = r.gen_range(0..schedule.num_train_steps());
            let eps = ArrayD::from_shape_fn(latents[i].raw_dim(), |_| {
                r.sample::<f64, _>(StandardNormal)
            });
            (t, eps)
        })
        .collect();

    let mut params = unet.params();
    if !cfg.freeze_text {
        params.extend(text.params());
    }
    let mut opt = Adam::new(
        params,
        AdamConfig { lr: cfg.lr, grad_clip: Some(cfg.grad_clip), ..AdamConfig::default() },
    );
    let mut rng = crate::indexed_rng(cfg.seed, 1);

    let eval = |epoch: usize, step: usize, train_loss: f64, curve: &mut TrainCurve| {
        let loss = denoise_holdout_loss(
            unet, text, schedule, &latents, &ids, &holdout_idx, &holdout_draws,
        );
        curve.rows.push(CurveRow {
            stage: "unet".into(),
            epoch,
            step,
            train_loss,
            holdout_loss: Some(loss),
        });
    };
    eval(0, 0, f64::NAN, &mut curve);
    persist_curve(&curve, log_path);

    let mut order = train_idx.clone();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let b = chunk.len();
            let mut z_t = Array4::<f64>::zeros((
                b,
                latents[0].shape()[1],
                latents[0].shape()[2],
                latents[0].shape()[3],
            ));
            let mut eps_all = z_t.clone();
            let mut ts = Vec::with_capacity(b);
            let mut batch_ids = Vec::with_capacity(b);
            for (bi, &i) in chunk.iter().enumerate() {
                let t = rng.gen_range(0..schedule.num_train_steps());
                let eps = ArrayD::from_shape_fn(latents[i].raw_dim(), |_| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let noised = schedule.add_noise(&latents[i], &eps, t)?;
                z_t.index_axis_mut(Axis(0), bi)
                    .assign(&noised.index_axis(Axis(0), 0));
                eps_all
                    .index_axis_mut(Axis(0), bi)
                    .assign(&eps.index_axis(Axis(0), 0));
                ts.push(t);
                batch_ids.push(ids[i].clone());
            }
            let g = Graph::new();
            let ctx = text.forward(&g, &batch_ids, None, cfg.freeze_text);
            let mask = TextEncoder::key_mask(&batch_ids);
            let eps_hat = unet.forward(&g, &Var::input(z_t.into_dyn()), &ts, &ctx, &mask, false);
            let loss = eps_hat.mse(&Var::input(eps_all.into_dyn()));
            let loss_v = loss.value().iter().next().copied().unwrap();
            if !loss_v.is_finite() {
                persist_curve(&curve, log_path);
                return Err(Error::Diverged(format!(
                    "denoiser loss {loss_v} at epoch {epoch} step {step}"
                )));
            }
            loss.backward();
            opt.step(&g);
            epoch_loss += loss_v;
            batches += 1;
            step += 1;
        }
        eval(epoch, step, epoch_loss / batches.max(1) as f64, &mut curve);
        persist_curve(&curve, log_path);
    }
    Ok((curve, latent_scale))
}

#[allow(clippy::too_many_arguments)]
fn denoise_holdout_loss(
    unet: &UNet,
    text: &TextEncoder,
    schedule: &NoiseSchedule,
    latents: &[ArrayD<f64>],
    ids: &[Vec<usize>],
    holdout_idx: &[usize],
    draws: &[(usize, ArrayD<f64>)],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (chunk, draw_chunk) in holdout_idx.chunks(64).zip(draws.chunks(64)) {
        let b = chunk.len();
        let shape = latents[chunk[0]].shape();
        let mut z_t = Array4::<f64>::zeros((b, shape[1], shape[2], shape[3]));
        let mut eps_all = z_t.clone();
        let mut ts = Vec::with_capacity(b);
        let mut batch_ids = Vec::with_capacity(b);
        for (bi, (&i, (t, eps))) in chunk.iter().zip(draw_chunk).enumerate() {
            let noised = schedule.add_noise(&latents[i], eps, *t).unwrap();
            z_t.index_axis_mut(Axis(0), bi).assign(&noised.index_axis(Axis(0), 0));
            eps_all.index_axis_mut(Axis(0), bi).assign(&eps.index_axis(Axis(0), 0));
            ts.push(*t);
            batch_ids.push(ids[i].clone());
        }
        let g = Graph::new();
        let ctx = text.forward(&g, &batch_ids, None, true);
        let mask = TextEncoder::key_mask(&batch_ids);
        let eps_hat = unet.forward(&g, &Var::input(z_t.into_dyn()), &ts, &ctx, &mask, true);
        let diff = eps_hat.value() - &eps_all.into_dyn();
        total += diff.iter().map(|v| v * v).sum::<f64>();
        count += diff.len();
    }
    total / count.max(1) as f64
}
