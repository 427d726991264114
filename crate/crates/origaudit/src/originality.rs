//! Reconstruction scoring, in-distribution assessment, threshold
//! calibration, and the originality score: the minimum token count whose
//! reconstructions pass both the reconstruction gate and the
//! in-distribution gate ("5+" when none does).

use std::path::Path;

use image::RgbImage;
use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{position_displacement, scene_distance, Detector};
use crate::diffusion::ModelBundle;
use crate::inversion::{invert, reconstruct, InversionConfig, TokenSequence, MAX_TOKENS};
use crate::render::{load_manifest, load_render_snapshot, load_spec_snapshot, render};
use crate::scene::{PlacedElement, Scene};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Perceptual metrics
// ---------------------------------------------------------------------------

/// An image distance in `[0, 2]` with `d(x,x) = 0` and symmetry.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

/// The synthetic-domain metric: 1 − Jaccard similarity of detected element
/// multisets. Positions are ignored, matching the caption semantics.
pub struct SceneJaccardMetric {
    detector: Detector,
}

impl SceneJaccardMetric {
    pub fn new(detector: Detector) -> Self {
        SceneJaccardMetric { detector }
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }
}

impl PerceptualMetric for SceneJaccardMetric {
    fn name(&self) -> &str {
        "scene-jaccard"
    }

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        let da = self.detector.detect(a)?;
        let db = self.detector.detect(b)?;
        Ok(scene_distance(&da, &db))
    }
}

/// A simple embedding metric for plugging real-image distances: cosine
/// distance over mean-pooled, contrast-normalized pixel blocks.
pub struct PixelCosineMetric {
    pub block: u32,
}

impl PixelCosineMetric {
    pub fn new(block: u32) -> Self {
        PixelCosineMetric { block: block.max(1) }
    }

    /// Unit-norm embedding: block-averaged channels, mean-centered.
    pub fn embed(&self, img: &RgbImage) -> Vec<f64> {
        let bw = img.width().div_ceil(self.block);
        let bh = img.height().div_ceil(self.block);
        let mut v = vec![0.0f64; (bw * bh * 3) as usize];
        let mut counts = vec![0usize; (bw * bh) as usize];
        for y in 0..img.height() {
            for x in 0..img.width() {
                let bi = (y / self.block) * bw + (x / self.block);
                let px = img.get_pixel(x, y).0;
                for c in 0..3 {
                    v[(bi * 3) as usize + c] += px[c] as f64 / 255.0;
                }
                counts[bi as usize] += 1;
            }
        }
        for (bi, &n) in counts.iter().enumerate() {
            for c in 0..3 {
                v[bi * 3 + c] /= n.max(1) as f64;
            }
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        for x in v.iter_mut() {
            *x -= mean;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        v
    }
}

impl PerceptualMetric for PixelCosineMetric {
    fn name(&self) -> &str {
        "pixel-cosine"
    }

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        let ea = self.embed(a);
        let eb = self.embed(b);
        if ea.len() != eb.len() {
            return Err(Error::InvalidConfig("image sizes differ".into()));
        }
        let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
        Ok((1.0 - dot).clamp(0.0, 2.0))
    }
}

// ---------------------------------------------------------------------------
// Reconstruction score
// ---------------------------------------------------------------------------

/// Per-image metric distances of the reconstructions to the query, plus
/// their arithmetic mean (lower is better).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionScore {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

pub fn reconstruction_score(
    recons: &[RgbImage],
    query: &RgbImage,
    metric: &dyn PerceptualMetric,
) -> Result<ReconstructionScore> {
    if recons.is_empty() {
        return Err(Error::InvalidConfig("reconstruction list is empty".into()));
    }
    let per_image: Vec<f64> =
        recons.iter().map(|r| metric.distance(r, query)).collect::<Result<_>>()?;
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(ReconstructionScore { per_image, mean })
}

// ---------------------------------------------------------------------------
// In-distribution assessment
// ---------------------------------------------------------------------------

/// Evidence for one reconstruction seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedEvidence {
    pub seed_index: usize,
    /// Matched-element center displacements (normalized units).
    pub displacements: Vec<f64>,
    pub max_displacement: f64,
    pub moved: bool,
}

/// Outcome of the synthetic in-distribution gate with the per-seed
/// displacement evidence that justifies it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InDistributionEvidence {
    pub pass: bool,
    pub varying_seeds: usize,
    pub required_seeds: usize,
    pub epsilon: f64,
    pub per_seed: Vec<SeedEvidence>,
    pub reason: Option<String>,
}

/// Synthetic in-distribution check: across `k_seeds` reconstructions,
/// matched elements must move by more than `epsilon` (vs. the query) in at
/// least `k_seeds - 1` seeds. Zero displacement everywhere means positional
/// memorization; no matched elements at all means no concept transfer.
pub fn in_distribution_synthetic(
    recons: &[RgbImage],
    query: &RgbImage,
    detector: &Detector,
    epsilon: f64,
    k_seeds: usize,
) -> Result<InDistributionEvidence> {
    let k = k_seeds.min(recons.len());
    if k == 0 {
        return Err(Error::InvalidConfig("no reconstructions to assess".into()));
    }
    let query_dets = detector.detect(query)?;
    let mut per_seed = Vec::with_capacity(k);
    let mut varying = 0usize;
    let mut any_matched = false;
    for (i, recon) in recons.iter().take(k).enumerate() {
        let dets = detector.detect(recon)?;
        let displacements = position_displacement(&query_dets, &dets);
        let max_displacement =
            displacements.iter().cloned().fold(0.0f64, f64::max);
        let moved = displacements.iter().any(|&d| d > epsilon);
        if !displacements.is_empty() {
            any_matched = true;
        }
        if moved {
            varying += 1;
        }
        per_seed.push(SeedEvidence { seed_index: i, displacements, max_displacement, moved });
    }
    let required = k.saturating_sub(1).max(1);
    let pass = any_matched && varying >= required;
    let reason = if !any_matched {
        Some("no concept transfer: no reconstruction matched any query element".to_string())
    } else if !pass {
        Some(format!(
            "positions reproduced: only {varying}/{required} required seeds moved beyond {epsilon}"
        ))
    } else {
        None
    };
    Ok(InDistributionEvidence {
        pass,
        varying_seeds: varying,
        required_seeds: required,
        epsilon,
        per_seed,
        reason,
    })
}

/// Real-world-style in-distribution gate: the probe concept must be present
/// in at least `min_fraction` of the probe generations.
pub fn in_distribution_editability(
    probe_images: &[RgbImage],
    presence_checker: &dyn Fn(&RgbImage) -> Result<bool>,
    min_fraction: f64,
) -> Result<(bool, f64)> {
    if probe_images.is_empty() {
        return Err(Error::InvalidConfig("no probe generations".into()));
    }
    let mut hits = 0usize;
    for img in probe_images {
        if presence_checker(img)? {
            hits += 1;
        }
    }
    let fraction = hits as f64 / probe_images.len() as f64;
    Ok((fraction >= min_fraction, fraction))
}

// ---------------------------------------------------------------------------
// Threshold calibration
// ---------------------------------------------------------------------------

/// A calibrated reconstruction threshold with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TauCalibration {
    pub tau: f64,
    pub metric: String,
    pub n_pairs: usize,
    pub seed: u64,
    pub dataset: String,
}

/// Calibrates the reconstruction gate: the 95th percentile of metric
/// distances between training images and re-renders of the same scene with
/// positions resampled. The resulting tau is the pipeline's measurement
/// noise floor: a reconstruction set scoring at or below it is
/// indistinguishable from a position-resampled copy of the query.
pub fn calibrate_threshold(
    bundle: &ModelBundle,
    dataset_dir: &Path,
    metric: &dyn PerceptualMetric,
    n_pairs: usize,
    seed: u64,
) -> Result<TauCalibration> {
    let manifest = load_manifest(dataset_dir)?;
    let spec = load_spec_snapshot(dataset_dir)?;
    let render_cfg = load_render_snapshot(dataset_dir)?;
    if render_cfg.canvas_px != bundle.meta.canvas_px {
        return Err(Error::InvalidConfig(format!(
            "dataset canvas {} does not match the bundle canvas {}",
            render_cfg.canvas_px, bundle.meta.canvas_px
        )));
    }
    let non_empty: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.elements.is_empty())
        .map(|(i, _)| i)
        .collect();
    if non_empty.is_empty() {
        return Err(Error::InvalidConfig("calibration needs non-empty scenes".into()));
    }
    let mut distances = Vec::with_capacity(n_pairs);
    let mut rng = crate::indexed_rng(seed, 0xca1);
    let margin = spec.position_margin;
    for _ in 0..n_pairs {
        let entry = &manifest.entries[non_empty[rng.gen_range(0..non_empty.len())]];
        let original = image::open(dataset_dir.join(&entry.file))?.to_rgb8();
        let elements: Vec<PlacedElement> = entry
            .elements
            .iter()
            .map(|el| PlacedElement {
                spec: el.spec,
                center: (
                    rng.gen_range(margin..=1.0 - margin),
                    rng.gen_range(margin..=1.0 - margin),
                ),
            })
            .collect();
        let rerender = render(
            &Scene { elements, canvas_px: render_cfg.canvas_px },
            &render_cfg,
        )?;
        distances.push(metric.distance(&original, &rerender)?);
    }
    distances.sort_by(|a, b| a.total_cmp(b));
    let idx = ((0.95 * n_pairs as f64).ceil() as usize).clamp(1, n_pairs) - 1;
    Ok(TauCalibration {
        tau: distances[idx],
        metric: metric.name().to_string(),
        n_pairs,
        seed,
        dataset: dataset_dir.display().to_string(),
    })
}

// ---------------------------------------------------------------------------
// Originality score
// ---------------------------------------------------------------------------

/// Gate settings for the originality sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OriginalityThresholds {
    /// Reconstruction gate: mean metric distance must be <= tau.
    pub tau: f64,
    /// In-distribution gate: displacement threshold (normalized).
    pub epsilon: f64,
    pub k_seeds: usize,
    /// Reconstructions per token count.
    pub recon_n: usize,
}

impl Default for OriginalityThresholds {
    fn default() -> Self {
        OriginalityThresholds { tau: 0.35, epsilon: 0.05, k_seeds: 4, recon_n: 20 }
    }
}

/// The originality verdict: the minimal sufficient token count, or "5+".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OriginalityScore {
    Tokens(usize),
    FivePlus,
}

impl Serialize for OriginalityScore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            OriginalityScore::Tokens(m) => s.serialize_u64(*m as u64),
            OriginalityScore::FivePlus => s.serialize_str("5+"),
        }
    }
}

impl<'de> Deserialize<'de> for OriginalityScore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(OriginalityScore::Tokens(n as usize)),
            Raw::S(s) if s == "5+" => Ok(OriginalityScore::FivePlus),
            Raw::S(s) => Err(serde::de::Error::custom(format!("bad originality {s:?}"))),
        }
    }
}

impl OriginalityScore {
    /// Numeric rank for ordering statistics; "5+" ranks just past the cap.
    pub fn rank(&self) -> f64 {
        match self {
            OriginalityScore::Tokens(m) => *m as f64,
            OriginalityScore::FivePlus => (MAX_TOKENS + 1) as f64,
        }
    }
}

/// One token count's evidence in the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerTokenRecord {
    pub m: usize,
    pub reconstruction: Option<ReconstructionScore>,
    pub reconstruction_pass: bool,
    pub in_distribution: Option<InDistributionEvidence>,
    pub in_distribution_pass: bool,
    pub pass: bool,
    pub inversion_final_loss: Option<f64>,
    /// Populated when a stage failed instead of scoring.
    pub error: Option<String>,
}

/// The per-query audit record: per-m evidence plus the verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OriginalityReport {
    pub query_id: String,
    pub thresholds: OriginalityThresholds,
    pub per_m: Vec<PerTokenRecord>,
    pub originality: OriginalityScore,
}

impl OriginalityReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<OriginalityReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Ascending sweep over token counts: invert, reconstruct, score, gate;
/// stops at the first m passing both gates. Per-m artifacts are cached
/// under `cache_dir` so interrupted sweeps resume instead of recomputing.
#[allow(clippy::too_many_arguments)]
pub fn originality_score(
    bundle: &ModelBundle,
    query: &RgbImage,
    query_id: &str,
    m_range: std::ops::RangeInclusive<usize>,
    thresholds: &OriginalityThresholds,
    base_cfg: &InversionConfig,
    metric: &dyn PerceptualMetric,
    detector: &Detector,
    cache_dir: Option<&Path>,
) -> Result<OriginalityReport> {
    let mut per_m = Vec::new();
    let mut verdict = OriginalityScore::FivePlus;
    for m in m_range {
        let record_path = cache_dir.map(|d| d.join(format!("m{m}")).join("record.json"));
        if let Some(p) = &record_path {
            if p.exists() {
                if let Ok(rec) = read_record(p) {
                    let stop = rec.pass;
                    per_m.push(rec);
                    if stop {
                        verdict = OriginalityScore::Tokens(m);
                        break;
                    }
                    continue;
                }
            }
        }
        let cfg = InversionConfig { m, ..base_cfg.clone() };
        let m_dir = cache_dir.map(|d| d.join(format!("m{m}")));
        if let Some(d) = &m_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
        }
        let record = match run_one_m(
            bundle, query, &cfg, thresholds, metric, detector, m_dir.as_deref(),
        ) {
            Ok(r) => r,
            Err(err) => PerTokenRecord {
                m,
                reconstruction: None,
                reconstruction_pass: false,
                in_distribution: None,
                in_distribution_pass: false,
                pass: false,
                inversion_final_loss: None,
                error: Some(err.to_string()),
            },
        };
        if let Some(p) = &record_path {
            write_record(p, &record)?;
        }
        let stop = record.pass;
        per_m.push(record);
        if stop {
            verdict = OriginalityScore::Tokens(m);
            break;
        }
    }
    Ok(OriginalityReport {
        query_id: query_id.to_string(),
        thresholds: thresholds.clone(),
        per_m,
        originality: verdict,
    })
}

fn run_one_m(
    bundle: &ModelBundle,
    query: &RgbImage,
    cfg: &InversionConfig,
    thresholds: &OriginalityThresholds,
    metric: &dyn PerceptualMetric,
    detector: &Detector,
    m_dir: Option<&Path>,
) -> Result<PerTokenRecord> {
    let tokens = match m_dir {
        Some(d) if d.join("tokens.json").exists() => TokenSequence::load(d)?,
        _ => {
            let log_path = m_dir.map(|d| d.join("loss.csv"));
            let t = invert(bundle, query, cfg, log_path.as_deref())?;
            if let Some(d) = m_dir {
                t.save(d)?;
            }
            t
        }
    };
    let recons = reconstruct(bundle, &tokens, thresholds.recon_n)?;
    if let Some(d) = m_dir {
        for (i, img) in recons.iter().enumerate() {
            let p = d.join(format!("recon_{i:02}.png"));
            img.save(&p)?;
        }
    }
    let reconstruction = reconstruction_score(&recons, query, metric)?;
    let reconstruction_pass = reconstruction.mean <= thresholds.tau;
    let in_distribution = in_distribution_synthetic(
        &recons,
        query,
        detector,
        thresholds.epsilon,
        thresholds.k_seeds,
    )?;
    let in_distribution_pass = in_distribution.pass;
    Ok(PerTokenRecord {
        m: cfg.m,
        reconstruction: Some(reconstruction),
        reconstruction_pass,
        in_distribution: Some(in_distribution),
        in_distribution_pass,
        pass: reconstruction_pass && in_distribution_pass,
        inversion_final_loss: tokens.final_loss(),
        error: None,
    })
}

fn read_record(path: &Path) -> Result<PerTokenRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_record(path: &Path, record: &PerTokenRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(record)?).map_err(|e| Error::io(path, e))
}

/// Renders a query scene to an image through the bundle's render snapshot.
pub fn render_query(bundle: &ModelBundle, scene: &Scene) -> Result<RgbImage> {
    render(scene, &bundle.meta.render_cfg)
}

/// Latent round trip helper used by tests: encode then decode.
pub fn autoencode(bundle: &ModelBundle, img: &RgbImage) -> Result<RgbImage> {
    let z = bundle.encode_image(img)?;
    let mut imgs = bundle.decode_latents(&z.index_axis(Axis(0), 0).insert_axis(Axis(0)).to_owned());
    Ok(imgs.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::RenderConfig;
    use crate::scene::{Color, ElementSpec, Shape, Size, Texture};

    fn img_of(spec: ElementSpec, center: (f64, f64), cfg: &RenderConfig) -> RgbImage {
        render(
            &Scene { elements: vec![PlacedElement { spec, center }], canvas_px: cfg.canvas_px },
            cfg,
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_score_identical_is_zero() {
        let cfg = RenderConfig::default();
        let metric = SceneJaccardMetric::new(Detector::oracle(cfg.clone(), 0.9));
        let q = img_of(
            ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Circle),
            (0.5, 0.5),
            &cfg,
        );
        let score = reconstruction_score(&[q.clone(), q.clone()], &q, &metric).unwrap();
        assert_eq!(score.mean, 0.0);
        assert_eq!(score.per_image, vec![0.0, 0.0]);
    }

    #[test]
    fn reconstruction_score_disjoint_is_one() {
        let cfg = RenderConfig::default();
        let metric = SceneJaccardMetric::new(Detector::oracle(cfg.clone(), 0.9));
        let q = img_of(
            ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Circle),
            (0.5, 0.5),
            &cfg,
        );
        let r = img_of(
            ElementSpec::new(Size::Small, Color::Blue, Texture::Empty, Shape::Square),
            (0.4, 0.6),
            &cfg,
        );
        let score = reconstruction_score(&[r], &q, &metric).unwrap();
        assert_eq!(score.mean, 1.0);
    }

    #[test]
    fn in_distribution_fails_on_identical_positions_and_passes_on_moved() {
        let cfg = RenderConfig::default();
        let detector = Detector::oracle(cfg.clone(), 0.9);
        let spec = ElementSpec::new(Size::Big, Color::Green, Texture::Full, Shape::Triangle);
        let q = img_of(spec, (0.5, 0.5), &cfg);
        // Pixel-identical reconstructions: overfit, zero displacement.
        let same = vec![q.clone(), q.clone(), q.clone(), q.clone()];
        let ev = in_distribution_synthetic(&same, &q, &detector, 0.05, 4).unwrap();
        assert!(!ev.pass);
        assert!(ev.reason.is_some());
        // Positions resampled: passes.
        let moved = vec![
            img_of(spec, (0.3, 0.3), &cfg),
            img_of(spec, (0.7, 0.4), &cfg),
            img_of(spec, (0.4, 0.7), &cfg),
            img_of(spec, (0.65, 0.65), &cfg),
        ];
        let ev = in_distribution_synthetic(&moved, &q, &detector, 0.05, 4).unwrap();
        assert!(ev.pass, "{ev:?}");
        // No concept transfer: all-white reconstructions.
        let blank = vec![RgbImage::from_pixel(64, 64, image::Rgb([255, 255, 255])); 4];
        let ev = in_distribution_synthetic(&blank, &q, &detector, 0.05, 4).unwrap();
        assert!(!ev.pass);
        assert!(ev.reason.as_deref().unwrap_or("").contains("no concept transfer"));
    }

    #[test]
    fn editability_gate_counts_presence() {
        let cfg = RenderConfig::default();
        let spec = ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Circle);
        let with = img_of(spec, (0.5, 0.5), &cfg);
        let without = RgbImage::from_pixel(64, 64, image::Rgb([255, 255, 255]));
        let detector = Detector::oracle(cfg.clone(), 0.9);
        let checker = |img: &RgbImage| -> Result<bool> {
            Ok(detector.detect(img)?.iter().any(|d| d.spec == spec))
        };
        let (pass, frac) =
            in_distribution_editability(&[with.clone(), with.clone()], &checker, 0.5).unwrap();
        assert!(pass);
        assert_eq!(frac, 1.0);
        let (pass, frac) =
            in_distribution_editability(&[with, without], &checker, 0.75).unwrap();
        assert!(!pass);
        assert_eq!(frac, 0.5);
    }

    #[test]
    fn originality_score_serializes_five_plus() {
        let a = serde_json::to_string(&OriginalityScore::Tokens(3)).unwrap();
        assert_eq!(a, "3");
        let b = serde_json::to_string(&OriginalityScore::FivePlus).unwrap();
        assert_eq!(b, "\"5+\"");
        let back: OriginalityScore = serde_json::from_str("\"5+\"").unwrap();
        assert_eq!(back, OriginalityScore::FivePlus);
        assert_eq!(OriginalityScore::FivePlus.rank(), 6.0);
    }

    #[test]
    fn pixel_cosine_metric_axioms() {
        let cfg = RenderConfig::default();
        let metric = PixelCosineMetric::new(8);
        let a = img_of(
            ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Circle),
            (0.4, 0.4),
            &cfg,
        );
        let b = img_of(
            ElementSpec::new(Size::Big, Color::Blue, Texture::Full, Shape::Square),
            (0.6, 0.6),
            &cfg,
        );
        assert_eq!(metric.distance(&a, &a).unwrap(), 0.0);
        assert_eq!(metric.distance(&a, &b).unwrap(), metric.distance(&b, &a).unwrap());
        let d = metric.distance(&a, &b).unwrap();
        assert!((0.0..=2.0).contains(&d));
        assert!(d > 0.0);
    }
}
