//! The trained detector backend: connected-component proposals plus a small
//! convolutional crop classifier with one softmax head per attribute axis.
//!
//! It mirrors the role of the fine-tuned detector in the reference
//! experiments: robust classification of noisy generated glyphs, with a
//! confidence score per detection.

use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{load_params, save_params, Adam, AdamConfig, Conv2d, Graph, Linear, Param, Var};
use crate::render::{load_manifest, load_render_snapshot, RenderConfig, WHITE};
use crate::scene::{Color, ElementSpec, Shape, Size, Texture};
use crate::{Error, Result};

use super::{color_components, centroid, Detection};

const HEAD_SIZES: [usize; 4] = [5, 3, 2, 2]; // shape, color, size, texture

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainDetectorConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Extra jittered copies of each training crop.
    pub augment_copies: usize,
    /// Center jitter amplitude in pixels.
    pub jitter_px: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainDetectorConfig {
    fn default() -> Self {
        TrainDetectorConfig {
            epochs: 3,
            batch: 64,
            lr: 2e-3,
            augment_copies: 2,
            jitter_px: 1.5,
            holdout_fraction: 0.1,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LearnedMeta {
    canvas_px: u32,
    crop_px: usize,
    palette: [[u8; 3]; 3],
    big_radius_px: f64,
}

/// Crop classifier with shape/color/size/texture heads.
pub struct LearnedDetector {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    meta: LearnedMeta,
}

impl LearnedDetector {
    pub fn init(render_cfg: &RenderConfig, seed: u64) -> LearnedDetector {
        let crop_px = crop_size(render_cfg);
        let mut rng = crate::indexed_rng(seed, 0);
        let q = conv_out(conv_out(crop_px));
        let conv1 = Conv2d::new("det.conv1", 3, 12, 3, 2, 1, &mut rng);
        let conv2 = Conv2d::new("det.conv2", 12, 24, 3, 2, 1, &mut rng);
        let fc1 = Linear::new("det.fc1", 24 * q * q, 64, &mut rng);
        let fc2 = Linear::new("det.fc2", 64, HEAD_SIZES.iter().sum(), &mut rng);
        LearnedDetector {
            conv1,
            conv2,
            fc1,
            fc2,
            meta: LearnedMeta {
                canvas_px: render_cfg.canvas_px,
                crop_px,
                palette: render_cfg.palette,
                big_radius_px: render_cfg.big_radius_px,
            },
        }
    }

    pub fn canvas_px(&self) -> u32 {
        self.meta.canvas_px
    }

    pub fn params(&self) -> Vec<Param> {
        [self.conv1.params(), self.conv2.params(), self.fc1.params(), self.fc2.params()]
            .concat()
    }

    fn logits(&self, g: &Graph, crops: &Var, frozen: bool) -> Var {
        let h = self.conv1.forward(g, crops, frozen).silu();
        let h = self.conv2.forward(g, &h, frozen).silu();
        let b = h.shape()[0];
        let flat = h.reshape(&[b, h.value().len() / b]);
        let h = self.fc1.forward(g, &flat, frozen).silu();
        self.fc2.forward(g, &h, frozen)
    }

    fn detect_all(&self, img: &RgbImage) -> Vec<Detection> {
        let comps = color_components(img, &self.meta.palette, 4);
        let mut proposals: Vec<(f64, f64)> = Vec::new();
        let max_glyph_area = (2.0 * self.meta.big_radius_px).powi(2);
        for comp in &comps {
            if comp.pixels.len() as f64 > 1.30 * max_glyph_area {
                for part in split_two(&comp.pixels) {
                    if part.len() >= 4 {
                        proposals.push(centroid(&part));
                    }
                }
            } else {
                proposals.push(centroid(&comp.pixels));
            }
        }
        if proposals.is_empty() {
            return Vec::new();
        }
        let crops = self.extract_crops(img, &proposals);
        let g = Graph::new();
        let logits = self.logits(&g, &Var::input(crops.into_dyn()), true);
        let canvas = self.meta.canvas_px as f64;
        proposals
            .iter()
            .zip(per_head_probs(logits.value()))
            .map(|(&(cx, cy), heads)| {
                let (spec, confidence) = classify(&heads);
                Detection { spec, center: (cx / canvas, cy / canvas), confidence }
            })
            .collect()
    }

    fn extract_crops(&self, img: &RgbImage, centers: &[(f64, f64)]) -> Array4<f64> {
        let c = self.meta.crop_px;
        let mut out = Array4::<f64>::zeros((centers.len(), 3, c, c));
        for (n, &(cx, cy)) in centers.iter().enumerate() {
            let x0 = cx.round() as i64 - c as i64 / 2;
            let y0 = cy.round() as i64 - c as i64 / 2;
            for dy in 0..c {
                for dx in 0..c {
                    let px = x0 + dx as i64;
                    let py = y0 + dy as i64;
                    let rgb = if px >= 0
                        && py >= 0
                        && (px as u32) < img.width()
                        && (py as u32) < img.height()
                    {
                        img.get_pixel(px as u32, py as u32).0
                    } else {
                        WHITE
                    };
                    for ch in 0..3 {
                        out[[n, ch, dy, dx]] = rgb[ch] as f64 / 255.0;
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&dir.join("weights.bin"), &self.params())?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(dir.join("meta.json"), meta).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<LearnedDetector> {
        let meta_path = dir.join("meta.json");
        let meta: LearnedMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        let cfg = RenderConfig {
            canvas_px: meta.canvas_px,
            big_radius_px: meta.big_radius_px,
            small_radius_px: meta.big_radius_px * 4.0 / 7.0,
            stroke_px: 1.0,
            palette: meta.palette,
        };
        let mut model = LearnedDetector::init(&cfg, 0);
        model.meta = meta;
        load_params(&dir.join("weights.bin"), &model.params())?;
        Ok(model)
    }
}

fn conv_out(h: usize) -> usize {
    (h + 2 - 3) / 2 + 1
}

fn crop_size(cfg: &RenderConfig) -> usize {
    let need = (2.0 * (cfg.big_radius_px + cfg.stroke_px)).ceil() as usize + 3;
    need.next_multiple_of(4)
}

fn per_head_probs(logits: &ArrayD<f64>) -> Vec<[Vec<f64>; 4]> {
    let l2 = logits.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut out = Vec::with_capacity(l2.nrows());
    for row in l2.rows() {
        let mut heads: [Vec<f64>; 4] = [vec![], vec![], vec![], vec![]];
        let mut offset = 0;
        for (h, &size) in HEAD_SIZES.iter().enumerate() {
            let slice = &row.as_slice().unwrap()[offset..offset + size];
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = slice.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            heads[h] = exps.into_iter().map(|v| v / sum).collect();
            offset += size;
        }
        out.push(heads);
    }
    out
}

fn classify(heads: &[Vec<f64>; 4]) -> (ElementSpec, f64) {
    let arg = |v: &[f64]| -> (usize, f64) {
        let mut best = 0;
        for (i, &p) in v.iter().enumerate() {
            if p > v[best] {
                best = i;
            }
        }
        (best, v[best])
    };
    let (si, sp) = arg(&heads[0]);
    let (ci, cp) = arg(&heads[1]);
    let (zi, zp) = arg(&heads[2]);
    let (ti, tp) = arg(&heads[3]);
    let spec = ElementSpec::new(
        Size::ALL[zi],
        Color::ALL[ci],
        Texture::ALL[ti],
        Shape::ALL[si],
    );
    (spec, sp * cp * zp * tp)
}

/// Splits an oversized component in two along its larger coordinate spread.
fn split_two(pixels: &[(u32, u32)]) -> Vec<Vec<(u32, u32)>> {
    let (min_x, max_x) = pixels.iter().fold((u32::MAX, 0), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (min_y, max_y) = pixels.iter().fold((u32::MAX, 0), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let by_x = max_x - min_x >= max_y - min_y;
    let mut c0 = if by_x { (min_x as f64, 0.0) } else { (0.0, min_y as f64) };
    let mut c1 = if by_x { (max_x as f64, 0.0) } else { (0.0, max_y as f64) };
    if by_x {
        c0.1 = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / pixels.len() as f64;
        c1.1 = c0.1;
    } else {
        c0.0 = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / pixels.len() as f64;
        c1.0 = c0.0;
    }
    let mut assign = vec![false; pixels.len()];
    for _ in 0..12 {
        for (i, &(x, y)) in pixels.iter().enumerate() {
            let d0 = (x as f64 - c0.0).powi(2) + (y as f64 - c0.1).powi(2);
            let d1 = (x as f64 - c1.0).powi(2) + (y as f64 - c1.1).powi(2);
            assign[i] = d1 < d0;
        }
        let mut acc = [(0.0, 0.0, 0usize); 2];
        for (i, &(x, y)) in pixels.iter().enumerate() {
            let k = assign[i] as usize;
            acc[k].0 += x as f64;
            acc[k].1 += y as f64;
            acc[k].2 += 1;
        }
        for k in 0..2 {
            if acc[k].2 > 0 {
                let c = if k == 0 { &mut c0 } else { &mut c1 };
                *c = (acc[k].0 / acc[k].2 as f64, acc[k].1 / acc[k].2 as f64);
            }
        }
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, &p) in pixels.iter().enumerate() {
        if assign[i] {
            b.push(p);
        } else {
            a.push(p);
        }
    }
    vec![a, b]
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct CropSample {
    /// Flattened `[3, crop, crop]` pixels.
    data: Vec<f64>,
    labels: [usize; 4],
}

fn label_of(spec: &ElementSpec) -> [usize; 4] {
    [
        Shape::ALL.iter().position(|s| s == &spec.shape).unwrap(),
        Color::ALL.iter().position(|c| c == &spec.color).unwrap(),
        Size::ALL.iter().position(|s| s == &spec.size).unwrap(),
        Texture::ALL.iter().position(|t| t == &spec.texture).unwrap(),
    ]
}

/// Precision/recall of a detector on clean renders, element level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectorEval {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Trains the crop classifier on a materialized dataset directory
/// (`manifest.jsonl` + `images/` + `render.toml`). Returns the trained
/// detector and its held-out evaluation.
pub fn train_detector(
    dataset_dir: &Path,
    cfg: &TrainDetectorConfig,
) -> Result<(LearnedDetector, DetectorEval)> {
    let manifest = load_manifest(dataset_dir)?;
    let render_cfg = load_render_snapshot(dataset_dir)?;
    let with_elements: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.elements.is_empty())
        .map(|(i, _)| i)
        .collect();
    if with_elements.is_empty() {
        return Err(Error::InvalidConfig(
            "detector training needs a manifest with at least one non-empty image".into(),
        ));
    }
    let holdout_every = (1.0 / cfg.holdout_fraction.clamp(0.01, 0.5)).round() as usize;
    let mut model = LearnedDetector::init(&render_cfg, cfg.seed);
    let crop = model.meta.crop_px;
    let canvas = render_cfg.canvas_px as f64;

    let mut train_samples: Vec<CropSample> = Vec::new();
    let mut holdout_images: Vec<(RgbImage, Vec<(ElementSpec, (f64, f64))>)> = Vec::new();
    for (row, &mi) in with_elements.iter().enumerate() {
        let entry = &manifest.entries[mi];
        let img_path = dataset_dir.join(&entry.file);
        let img = image::open(&img_path)?.to_rgb8();
        let truth: Vec<(ElementSpec, (f64, f64))> =
            entry.elements.iter().map(|el| (el.spec, el.center)).collect();
        if row % holdout_every == 0 {
            holdout_images.push((img, truth));
            continue;
        }
        let mut rng = crate::indexed_rng(cfg.seed ^ 0x9e37, mi as u64);
        for el in &entry.elements {
            for copy in 0..=cfg.augment_copies {
                let (mut cx, mut cy) = (el.center.0 * canvas, el.center.1 * canvas);
                if copy > 0 {
                    cx += rng.gen_range(-cfg.jitter_px..=cfg.jitter_px);
                    cy += rng.gen_range(-cfg.jitter_px..=cfg.jitter_px);
                }
                let crops = model.extract_crops(&img, &[(cx, cy)]);
                train_samples.push(CropSample {
                    data: crops.into_raw_vec_and_offset().0,
                    labels: label_of(&el.spec),
                });
            }
        }
    }
    if train_samples.is_empty() {
        return Err(Error::InvalidConfig("no training crops after the holdout split".into()));
    }

    let mut opt = Adam::new(
        model.params(),
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
    );
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut rng = crate::indexed_rng(cfg.seed, 1);
    for _epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch) {
            let g = Graph::new();
            let b = chunk.len();
            let mut xs = Array4::<f64>::zeros((b, 3, crop, crop));
            for (i, &si) in chunk.iter().enumerate() {
                let flat = ndarray::ArrayView::from_shape(
                    (3, crop, crop),
                    train_samples[si].data.as_slice(),
                )
                .unwrap();
                xs.index_axis_mut(Axis(0), i).assign(&flat);
            }
            let logits = model.logits(&g, &Var::input(xs.into_dyn()), false);
            let loss = multi_head_ce(&logits, chunk.iter().map(|&si| train_samples[si].labels));
            if !loss.value().iter().next().unwrap().is_finite() {
                return Err(Error::Diverged("detector loss became non-finite".into()));
            }
            loss.backward();
            opt.step(&g);
        }
    }

    let eval = evaluate(&model, &holdout_images, 5.0 / canvas)?;
    Ok((model, eval))
}

fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
}

/// Sum of per-head cross-entropies, averaged over the batch:
/// `CE = mean_i(logsumexp(head_i) - head_i[label_i])` per head.
fn multi_head_ce(logits: &Var, labels: impl Iterator<Item = [usize; 4]>) -> Var {
    let labels: Vec<[usize; 4]> = labels.collect();
    let b = labels.len();
    let mut offset = 0;
    let mut total: Option<Var> = None;
    for (h, &size) in HEAD_SIZES.iter().enumerate() {
        let head = logits.narrow(1, offset, size);
        let lse = head.logsumexp_last();
        let mut onehot = Array2::<f64>::zeros((b, size));
        for (i, l) in labels.iter().enumerate() {
            onehot[[i, l[h]]] = 1.0;
        }
        let picked = head
            .mul(&Var::input(onehot.into_dyn()))
            .mean_last_keepdim()
            .scale(size as f64);
        let term = lse.sub(&picked).mean_all();
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term),
        });
        offset += size;
    }
    total.unwrap()
}

/// Applies `model` to clean renders and scores element-level detection.
/// `center_tol` is in normalized units.
pub fn evaluate(
    model: &LearnedDetector,
    images: &[(RgbImage, Vec<(ElementSpec, (f64, f64))>)],
    center_tol: f64,
) -> Result<DetectorEval> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    let tol = center_tol;
    for (img, truth) in images {
        let dets = model.detect_all(img);
        let dets: Vec<&Detection> = dets.iter().filter(|d| d.confidence >= 0.5).collect();
        let mut used = vec![false; truth.len()];
        for d in &dets {
            let mut matched = false;
            for (i, (spec, center)) in truth.iter().enumerate() {
                if used[i] || spec != &d.spec {
                    continue;
                }
                let dx = center.0 - d.center.0;
                let dy = center.1 - d.center.1;
                if (dx * dx + dy * dy).sqrt() <= tol {
                    used[i] = true;
                    matched = true;
                    break;
                }
            }
            if matched {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        fnn += used.iter().filter(|u| !**u).count();
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fnn == 0 { 1.0 } else { tp as f64 / (tp + fnn) as f64 };
    Ok(DetectorEval {
        precision,
        recall,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fnn,
    })
}
