//! Element detection and scene-level metrics.
//!
//! Two backends mirror the two jobs the pipeline has:
//!
//! * [`OracleDetector`] — analytic template matching against the renderer's
//!   own glyph geometry. On clean, non-overlapping renders it recovers the
//!   exact element multiset; it is the ground-truth test surface.
//! * [`LearnedDetector`] — a small trained crop classifier behind the same
//!   proposal machinery, for noisy generated images where analytic
//!   matching degrades.
//!
//! Both emit [`Detection`]s with a confidence in `[0,1]`; detections below
//! the configured threshold are discarded before any metric is computed.

mod learned;

pub use learned::{train_detector, DetectorEval, LearnedDetector, TrainDetectorConfig};

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::render::{Glyph, RenderConfig, WHITE};
use crate::scene::{Color, ElementSpec, Shape, Size, Texture};
use crate::{Error, Result};

/// One detected element: spec, normalized center, confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub spec: ElementSpec,
    pub center: (f64, f64),
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Learned,
}

/// Threshold and backend selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub confidence_threshold: f64,
    pub backend: BackendKind,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { confidence_threshold: 0.9, backend: BackendKind::Oracle }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.confidence_threshold <= 0.0 || self.confidence_threshold > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "confidence_threshold {} outside (0,1]",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// A ready-to-run detector: backend plus threshold.
pub enum Detector {
    Oracle(OracleDetector, f64),
    Learned(LearnedDetector, f64),
}

impl Detector {
    pub fn oracle(render_cfg: RenderConfig, threshold: f64) -> Detector {
        Detector::Oracle(OracleDetector::new(render_cfg), threshold)
    }

    pub fn learned(model: LearnedDetector, threshold: f64) -> Detector {
        Detector::Learned(model, threshold)
    }

    pub fn canvas_px(&self) -> u32 {
        match self {
            Detector::Oracle(d, _) => d.cfg.canvas_px,
            Detector::Learned(d, _) => d.canvas_px(),
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Detector::Oracle(_, t) | Detector::Learned(_, t) => *t,
        }
    }

    /// Detects elements, keeping only detections at or above the threshold.
    pub fn detect(&self, img: &RgbImage) -> Result<Vec<Detection>> {
        let want = self.canvas_px();
        if img.width() != want || img.height() != want {
            return Err(Error::WrongImageSize { got_w: img.width(), got_h: img.height(), want });
        }
        let mut dets = match self {
            Detector::Oracle(d, _) => d.detect_all(img),
            Detector::Learned(d, _) => d.detect_all(img),
        };
        let threshold = self.threshold();
        dets.retain(|d| d.confidence >= threshold);
        dets.sort_by(|a, b| {
            a.center
                .1
                .total_cmp(&b.center.1)
                .then(a.center.0.total_cmp(&b.center.0))
                .then(a.spec.cmp(&b.spec))
        });
        Ok(dets)
    }
}

// ---------------------------------------------------------------------------
// Foreground extraction shared by both backends
// ---------------------------------------------------------------------------

/// Squared RGB distance below which a pixel counts as one of the palette
/// colors rather than background.
const FOREGROUND_DIST2: i64 = 120 * 120;

fn nearest_palette(palette: &[[u8; 3]; 3], px: [u8; 3]) -> Option<usize> {
    let d2 = |a: [u8; 3], b: [u8; 3]| -> i64 {
        (0..3)
            .map(|i| {
                let d = a[i] as i64 - b[i] as i64;
                d * d
            })
            .sum()
    };
    if d2(px, WHITE) <= FOREGROUND_DIST2 {
        return None;
    }
    let mut best = 0usize;
    let mut best_d = i64::MAX;
    for (i, &c) in palette.iter().enumerate() {
        let d = d2(px, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Some(best)
}

/// Connected foreground pixels of a single palette color.
struct Component {
    color: Color,
    pixels: Vec<(u32, u32)>,
}

fn color_components(img: &RgbImage, palette: &[[u8; 3]; 3], min_area: usize) -> Vec<Component> {
    let (w, h) = (img.width(), img.height());
    let mut color_of = vec![usize::MAX; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            if let Some(c) = nearest_palette(palette, img.get_pixel(x, y).0) {
                color_of[(y * w + x) as usize] = c;
            }
        }
    }
    let mut seen = vec![false; (w * h) as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            let c = color_of[idx];
            if c == usize::MAX || seen[idx] {
                continue;
            }
            let mut pixels = Vec::new();
            let mut stack = vec![(x, y)];
            seen[idx] = true;
            while let Some((px, py)) = stack.pop() {
                pixels.push((px, py));
                let neighbors = [
                    (px.wrapping_sub(1), py),
                    (px + 1, py),
                    (px, py.wrapping_sub(1)),
                    (px, py + 1),
                ];
                for (nx, ny) in neighbors {
                    if nx < w && ny < h {
                        let nidx = (ny * w + nx) as usize;
                        if !seen[nidx] && color_of[nidx] == c {
                            seen[nidx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            if pixels.len() >= min_area {
                pixels.sort_unstable();
                out.push(Component { color: [Color::Red, Color::Green, Color::Blue][c], pixels });
            }
        }
    }
    out
}

fn centroid(pixels: &[(u32, u32)]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let (sx, sy) = pixels
        .iter()
        .fold((0.0, 0.0), |acc, &(x, y)| (acc.0 + x as f64 + 0.5, acc.1 + y as f64 + 0.5));
    (sx / n, sy / n)
}

// ---------------------------------------------------------------------------
// Oracle backend
// ---------------------------------------------------------------------------

const MIN_COMPONENT_AREA: usize = 4;
/// Peeling accepts a template match at or above this overlap.
const MIN_PEEL_IOU: f64 = 0.45;
/// Matches at or above this overlap count as exact for confidence purposes.
const EXACT_IOU: f64 = 0.9;

/// Analytic detector matching the renderer's glyph templates against
/// connected components, peeling overlapped glyphs greedily.
pub struct OracleDetector {
    cfg: RenderConfig,
}

impl OracleDetector {
    pub fn new(cfg: RenderConfig) -> Self {
        OracleDetector { cfg }
    }

    pub fn render_config(&self) -> &RenderConfig {
        &self.cfg
    }

    fn detect_all(&self, img: &RgbImage) -> Vec<Detection> {
        let mut out = Vec::new();
        for comp in color_components(img, &self.cfg.palette, MIN_COMPONENT_AREA) {
            self.peel_component(&comp, &mut out);
        }
        out
    }

    /// Repeatedly explains the component's pixels by the best-fitting glyph
    /// template, removing explained pixels, until nothing fits.
    fn peel_component(&self, comp: &Component, out: &mut Vec<Detection>) {
        let canvas = self.cfg.canvas_px as f64;
        let mut remaining: std::collections::BTreeSet<(u32, u32)> =
            comp.pixels.iter().copied().collect();
        while remaining.len() >= MIN_COMPONENT_AREA {
            let pixels: Vec<(u32, u32)> = remaining.iter().copied().collect();
            let (cx, cy) = centroid(&pixels);
            let mut best: Option<(f64, ElementSpec, (f64, f64), Vec<(u32, u32)>)> = None;
            for shape in Shape::ALL {
                for size in Size::ALL {
                    for texture in Texture::ALL {
                        let spec = ElementSpec::new(*size, comp.color, *texture, *shape);
                        let r = self.cfg.radius_for(*size);
                        let glyph = Glyph::new(*shape, *texture, r, self.cfg.stroke_px);
                        let (iou, center, covered) =
                            best_alignment(&glyph, &remaining, (cx, cy), self.cfg.canvas_px);
                        if best.as_ref().map_or(true, |(b, ..)| iou > *b) {
                            best = Some((iou, spec, center, covered));
                        }
                    }
                }
            }
            let Some((iou, spec, center, covered)) = best else { break };
            if iou < MIN_PEEL_IOU || covered.is_empty() {
                break;
            }
            let confidence = if iou >= EXACT_IOU { 1.0 } else { iou };
            out.push(Detection {
                spec,
                center: (center.0 / canvas, center.1 / canvas),
                confidence,
            });
            for p in covered {
                remaining.remove(&p);
            }
        }
    }
}

/// Best subpixel alignment of `glyph` over the remaining pixel set, by a
/// coarse-to-fine search around the centroid. Returns
/// (IoU against remaining, center in pixels, template pixels hit).
fn best_alignment(
    glyph: &Glyph,
    remaining: &std::collections::BTreeSet<(u32, u32)>,
    centroid: (f64, f64),
    canvas_px: u32,
) -> (f64, (f64, f64), Vec<(u32, u32)>) {
    let mut best_center = centroid;
    let mut best_iou = -1.0;
    for (step, span) in [(0.5f64, 1.0f64), (0.25, 0.5), (0.125, 0.25), (0.0625, 0.125)] {
        let base = best_center;
        let mut candidates = Vec::new();
        let k = (span / step).round() as i32;
        for dy in -k..=k {
            for dx in -k..=k {
                candidates.push((base.0 + dx as f64 * step, base.1 + dy as f64 * step));
            }
        }
        for c in candidates {
            let iou = alignment_iou(glyph, remaining, c, canvas_px).0;
            if iou > best_iou {
                best_iou = iou;
                best_center = c;
            }
        }
    }
    let (iou, covered) = alignment_iou(glyph, remaining, best_center, canvas_px);
    (iou, best_center, covered)
}

fn alignment_iou(
    glyph: &Glyph,
    remaining: &std::collections::BTreeSet<(u32, u32)>,
    center: (f64, f64),
    canvas_px: u32,
) -> (f64, Vec<(u32, u32)>) {
    let r = glyph.extent();
    let n = canvas_px as i64;
    let mut template = 0usize;
    let mut hit = Vec::new();
    let lo_x = ((center.0 - r - 1.0).floor() as i64).max(0);
    let hi_x = ((center.0 + r + 1.0).ceil() as i64).min(n - 1);
    let lo_y = ((center.1 - r - 1.0).floor() as i64).max(0);
    let hi_y = ((center.1 + r + 1.0).ceil() as i64).min(n - 1);
    for py in lo_y..=hi_y {
        for px in lo_x..=hi_x {
            let dx = px as f64 + 0.5 - center.0;
            let dy = py as f64 + 0.5 - center.1;
            if glyph.contains(dx, dy) {
                template += 1;
                if remaining.contains(&(px as u32, py as u32)) {
                    hit.push((px as u32, py as u32));
                }
            }
        }
    }
    if template == 0 {
        return (0.0, hit);
    }
    let union = template + remaining.len() - hit.len();
    (hit.len() as f64 / union as f64, hit)
}

// ---------------------------------------------------------------------------
// Metrics over detections
// ---------------------------------------------------------------------------

fn spec_counts(dets: &[Detection]) -> BTreeMap<ElementSpec, usize> {
    let mut m = BTreeMap::new();
    for d in dets {
        *m.entry(d.spec).or_insert(0) += 1;
    }
    m
}

/// Frequency of `target` among all detected elements across `images`:
/// `count(detections == target) / count(all detections)`, with 0/0 = 0.
pub fn missing_element_frequency(
    detector: &Detector,
    images: &[RgbImage],
    target: &ElementSpec,
) -> Result<f64> {
    let (hits, total) = missing_element_counts(detector, images, target)?;
    if total == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / total as f64)
}

/// Raw counts behind [`missing_element_frequency`]; useful for pooling
/// across replicate runs.
pub fn missing_element_counts(
    detector: &Detector,
    images: &[RgbImage],
    target: &ElementSpec,
) -> Result<(usize, usize)> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for img in images {
        for det in detector.detect(img)? {
            total += 1;
            if det.spec == *target {
                hits += 1;
            }
        }
    }
    Ok((hits, total))
}

/// 1 − Jaccard similarity of the element-spec multisets (positions and
/// confidences are ignored). Identical multisets (including both empty)
/// give 0; disjoint non-empty multisets give 1.
pub fn scene_distance(a: &[Detection], b: &[Detection]) -> f64 {
    let ca = spec_counts(a);
    let cb = spec_counts(b);
    let mut intersection = 0usize;
    let mut union = 0usize;
    let keys: std::collections::BTreeSet<&ElementSpec> = ca.keys().chain(cb.keys()).collect();
    for k in keys {
        let x = ca.get(k).copied().unwrap_or(0);
        let y = cb.get(k).copied().unwrap_or(0);
        intersection += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        return 0.0;
    }
    1.0 - intersection as f64 / union as f64
}

/// Euclidean center distances between elements matched by spec, greedy
/// nearest pair first. Unmatched elements contribute nothing.
pub fn position_displacement(a: &[Detection], b: &[Detection]) -> Vec<f64> {
    let mut pairs = Vec::new();
    for (i, da) in a.iter().enumerate() {
        for (j, db) in b.iter().enumerate() {
            if da.spec == db.spec {
                let dx = da.center.0 - db.center.0;
                let dy = da.center.1 - db.center.1;
                pairs.push(((dx * dx + dy * dy).sqrt(), i, j));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (d, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push(d);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render, RenderConfig};
    use crate::scene::{sample_scene, DatasetSpec, ElementSpace, PlacedElement, Scene};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(spec: ElementSpec, center: (f64, f64)) -> Detection {
        Detection { spec, center, confidence: 1.0 }
    }

    fn el(size: Size, color: Color, texture: Texture, shape: Shape) -> ElementSpec {
        ElementSpec::new(size, color, texture, shape)
    }

    /// Random scene whose glyphs are guaranteed non-overlapping so the
    /// multiset is recoverable from pixels.
    pub(crate) fn separated_scene(
        space: &ElementSpace,
        cfg: &RenderConfig,
        max_elements: usize,
        rng: &mut impl Rng,
    ) -> Scene {
        let all = crate::scene::enumerate_space(space).unwrap();
        let margin = cfg.min_margin().max(0.25);
        let min_sep = 2.0 * (cfg.big_radius_px + 1.0) / cfg.canvas_px as f64 + 0.04;
        let count = rng.gen_range(0..=max_elements);
        let mut elements: Vec<PlacedElement> = Vec::new();
        let mut guard = 0;
        while elements.len() < count && guard < 10_000 {
            guard += 1;
            let spec = all[rng.gen_range(0..all.len())];
            let center =
                (rng.gen_range(margin..=1.0 - margin), rng.gen_range(margin..=1.0 - margin));
            let ok = elements.iter().all(|e| {
                let dx = e.center.0 - center.0;
                let dy = e.center.1 - center.1;
                (dx * dx + dy * dy).sqrt() >= min_sep
            });
            if ok {
                elements.push(PlacedElement { spec, center });
            }
        }
        Scene { elements, canvas_px: cfg.canvas_px }
    }

    #[test]
    fn all_white_image_detects_nothing() {
        let cfg = RenderConfig::default();
        let detector = Detector::oracle(cfg.clone(), 0.9);
        let img = render(&Scene::empty(cfg.canvas_px), &cfg).unwrap();
        assert!(detector.detect(&img).unwrap().is_empty());
    }

    #[test]
    fn wrong_image_size_is_a_contract_error() {
        let detector = Detector::oracle(RenderConfig::default(), 0.9);
        let img = RgbImage::from_pixel(32, 32, image::Rgb(WHITE));
        assert!(matches!(
            detector.detect(&img),
            Err(Error::WrongImageSize { want: 64, .. })
        ));
    }

    #[test]
    fn clean_render_round_trip_is_exact_at_default_canvas() {
        let cfg = RenderConfig::default();
        let detector = Detector::oracle(cfg.clone(), 0.9);
        let space = ElementSpace::maximal();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..150 {
            let scene = separated_scene(&space, &cfg, 3, &mut rng);
            let img = render(&scene, &cfg).unwrap();
            let dets = detector.detect(&img).unwrap();
            assert_eq!(spec_counts(&dets), scene.multiset(), "scene {scene:?}");
            for d in &dets {
                assert_eq!(d.confidence, 1.0);
            }
        }
    }

    #[test]
    fn clean_render_round_trip_is_exact_at_32px() {
        let cfg = RenderConfig::for_canvas(32);
        let detector = Detector::oracle(cfg.clone(), 0.9);
        // The space used by the originality experiments: big/full only.
        let space = ElementSpace {
            shapes: Shape::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            sizes: vec![Size::Big],
            textures: vec![Texture::Full],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..150 {
            let scene = separated_scene(&space, &cfg, 2, &mut rng);
            let img = render(&scene, &cfg).unwrap();
            let dets = detector.detect(&img).unwrap();
            assert_eq!(spec_counts(&dets), scene.multiset(), "scene {scene:?}");
        }
    }

    #[test]
    fn detected_centers_are_close_to_true_centers() {
        let cfg = RenderConfig::default();
        let detector = Detector::oracle(cfg.clone(), 0.9);
        let spec = el(Size::Big, Color::Green, Texture::Full, Shape::Triangle);
        let scene = Scene {
            elements: vec![PlacedElement { spec, center: (0.613, 0.377) }],
            canvas_px: 64,
        };
        let dets = detector.detect(&render(&scene, &cfg).unwrap()).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].center.0 - 0.613).abs() < 0.02);
        assert!((dets[0].center.1 - 0.377).abs() < 0.02);
    }

    #[test]
    fn overlapping_distinct_colors_are_peeled() {
        let cfg = RenderConfig::default();
        let detector = Detector::oracle(cfg.clone(), 0.5);
        let a = el(Size::Big, Color::Red, Texture::Full, Shape::Circle);
        let b = el(Size::Big, Color::Blue, Texture::Full, Shape::Square);
        let scene = Scene {
            elements: vec![
                PlacedElement { spec: a, center: (0.42, 0.5) },
                PlacedElement { spec: b, center: (0.58, 0.5) },
            ],
            canvas_px: 64,
        };
        let dets = detector.detect(&render(&scene, &cfg).unwrap()).unwrap();
        let counts = spec_counts(&dets);
        assert_eq!(counts.get(&b).copied(), Some(1));
        // The occluded red circle is still visible enough to be recovered.
        assert_eq!(counts.get(&a).copied(), Some(1));
    }

    #[test]
    fn threshold_is_applied_and_monotone() {
        let cfg = RenderConfig::default();
        let space = ElementSpace::maximal();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = separated_scene(&space, &cfg, 3, &mut rng);
        let img = render(&scene, &cfg).unwrap();
        let low = Detector::oracle(cfg.clone(), 0.2).detect(&img).unwrap();
        let high = Detector::oracle(cfg.clone(), 0.95).detect(&img).unwrap();
        assert!(high.len() <= low.len());
        for d in &high {
            assert!(d.confidence >= 0.95);
        }
    }

    #[test]
    fn frequency_definition_and_zero_convention() {
        let cfg = RenderConfig::default();
        let detector = Detector::oracle(cfg.clone(), 0.9);
        let target = el(Size::Big, Color::Red, Texture::Full, Shape::Circle);
        let other = el(Size::Big, Color::Blue, Texture::Full, Shape::Square);
        let mk = |spec, center| Scene {
            elements: vec![PlacedElement { spec, center }],
            canvas_px: 64,
        };
        let images = vec![
            render(&mk(target, (0.3, 0.3)), &cfg).unwrap(),
            render(&mk(other, (0.7, 0.7)), &cfg).unwrap(),
            render(&mk(other, (0.3, 0.7)), &cfg).unwrap(),
            render(&mk(other, (0.7, 0.3)), &cfg).unwrap(),
        ];
        let f = missing_element_frequency(&detector, &images, &target).unwrap();
        assert!((f - 0.25).abs() < 1e-12);
        let empties = vec![render(&Scene::empty(64), &cfg).unwrap()];
        assert_eq!(missing_element_frequency(&detector, &empties, &target).unwrap(), 0.0);
    }

    #[test]
    fn scene_distance_examples() {
        let a = el(Size::Big, Color::Red, Texture::Full, Shape::Circle);
        let b = el(Size::Big, Color::Blue, Texture::Full, Shape::Square);
        let c = el(Size::Small, Color::Green, Texture::Empty, Shape::Star);
        let d1 = vec![det(a, (0.2, 0.2)), det(b, (0.8, 0.8))];
        let d2 = vec![det(a, (0.5, 0.5)), det(c, (0.3, 0.3))];
        assert_eq!(scene_distance(&d1, &d1), 0.0);
        assert_eq!(scene_distance(&[], &[]), 0.0);
        assert_eq!(scene_distance(&d1, &[det(c, (0.1, 0.1))]), 1.0);
        let got = scene_distance(&d1, &d2);
        assert!((got - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn displacement_examples() {
        let a = el(Size::Big, Color::Red, Texture::Full, Shape::Circle);
        let d1 = vec![det(a, (0.1, 0.1))];
        let d2 = vec![det(a, (0.4, 0.5))];
        let same = position_displacement(&d1, &d1);
        assert_eq!(same, vec![0.0]);
        let moved = position_displacement(&d1, &d2);
        assert_eq!(moved.len(), 1);
        assert!((moved[0] - 0.5).abs() < 1e-12);
        // Spec mismatch: no pairs.
        let b = el(Size::Big, Color::Blue, Texture::Full, Shape::Square);
        assert!(position_displacement(&d1, &[det(b, (0.4, 0.5))]).is_empty());
    }

    proptest! {
        #[test]
        fn scene_distance_is_a_pseudometric(seed in 0u64..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = DatasetSpec {
                space: ElementSpace::maximal(),
                num_images: 1,
                empty_fraction: 0.2,
                max_elements: 3,
                leave_out: vec![],
                pair_rules: vec![],
                seed,
                position_margin: 0.25,
                fixed_pair_positions: None,
            };
            let to_dets = |s: &Scene| -> Vec<Detection> {
                s.elements.iter().map(|e| det(e.spec, e.center)).collect()
            };
            let x = to_dets(&sample_scene(&spec, 64, &mut rng).unwrap());
            let y = to_dets(&sample_scene(&spec, 64, &mut rng).unwrap());
            let z = to_dets(&sample_scene(&spec, 64, &mut rng).unwrap());
            let dxy = scene_distance(&x, &y);
            let dyx = scene_distance(&y, &x);
            prop_assert_eq!(dxy, dyx);
            prop_assert_eq!(scene_distance(&x, &x), 0.0);
            prop_assert!(dxy >= 0.0 && dxy <= 1.0);
            // Triangle inequality for multiset Jaccard distance.
            let dxz = scene_distance(&x, &z);
            let dzy = scene_distance(&z, &y);
            prop_assert!(dxy <= dxz + dzy + 1e-12);
        }
    }
}
