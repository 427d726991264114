//! Deterministic rasterization of scenes and bulk dataset materialization.
//!
//! Rendering is a pure function of `(scene, config)`: binary pixel-center
//! membership tests, no anti-aliasing, exact palette colors. That keeps the
//! detector's clean-render round trip exact and dataset generation
//! byte-reproducible.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scene::{
    sample_many, caption, DatasetSpec, PlacedElement, SamplingLabel, Scene, Shape, Texture,
};
use crate::{Error, Result};

pub const WHITE: [u8; 3] = [255, 255, 255];

/// Glyph geometry and palette for the rasterizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub canvas_px: u32,
    pub big_radius_px: f64,
    pub small_radius_px: f64,
    pub stroke_px: f64,
    /// RGB triples for red, green, blue in that order.
    pub palette: [[u8; 3]; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig::for_canvas(64)
    }
}

impl RenderConfig {
    /// Scales the default glyph geometry to a square canvas: big radius
    /// 7/32 of the canvas, small radius 4/32, stroke 1/32.
    pub fn for_canvas(canvas_px: u32) -> Self {
        let c = canvas_px as f64;
        RenderConfig {
            canvas_px,
            big_radius_px: c * 7.0 / 32.0,
            small_radius_px: c * 4.0 / 32.0,
            stroke_px: (c / 32.0).max(1.0),
            palette: [[255, 0, 0], [0, 200, 0], [0, 0, 255]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.big_radius_px > self.small_radius_px
            && self.small_radius_px > self.stroke_px
            && self.stroke_px >= 1.0)
        {
            return Err(Error::InvalidRenderConfig(format!(
                "need big_radius > small_radius > stroke >= 1, got {} / {} / {}",
                self.big_radius_px, self.small_radius_px, self.stroke_px
            )));
        }
        if self.min_margin() >= 0.5 {
            return Err(Error::InvalidRenderConfig(
                "glyphs too large for the canvas".into(),
            ));
        }
        Ok(())
    }

    /// Smallest normalized center margin at which every glyph stays fully
    /// inside the canvas.
    pub fn min_margin(&self) -> f64 {
        (self.big_radius_px + 1.0) / self.canvas_px as f64
    }

    pub fn radius_for(&self, size: crate::scene::Size) -> f64 {
        match size {
            crate::scene::Size::Big => self.big_radius_px,
            crate::scene::Size::Small => self.small_radius_px,
        }
    }

    pub fn color_rgb(&self, color: crate::scene::Color) -> [u8; 3] {
        self.palette[color as usize]
    }
}

// ---------------------------------------------------------------------------
// Glyph geometry
// ---------------------------------------------------------------------------

/// Star inner-vertex radius as a fraction of the outer radius.
const STAR_INNER_RATIO: f64 = 0.5;

#[derive(Debug, Clone)]
enum Outline {
    Circle { r: f64 },
    /// Axis-aligned square by half-extent.
    Square { r: f64 },
    /// Convex or star polygon centered at the origin, y axis pointing down.
    Poly { pts: Vec<(f64, f64)> },
}

impl Outline {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match self {
            Outline::Circle { r } => dx * dx + dy * dy <= r * r,
            Outline::Square { r } => dx.abs().max(dy.abs()) <= *r,
            Outline::Poly { pts } => poly_contains(pts, dx, dy),
        }
    }

    fn scaled(&self, s: f64) -> Outline {
        match self {
            Outline::Circle { r } => Outline::Circle { r: r * s },
            Outline::Square { r } => Outline::Square { r: r * s },
            Outline::Poly { pts } => {
                Outline::Poly { pts: pts.iter().map(|&(x, y)| (x * s, y * s)).collect() }
            }
        }
    }
}

/// Even-odd point-in-polygon test at pixel centers.
fn poly_contains(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) {
            let x_cross = xi + (y - yi) / (yj - yi) * (xj - xi);
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn regular_polygon(k: usize, r: f64) -> Vec<(f64, f64)> {
    // First vertex points up (negative y in raster coordinates).
    (0..k)
        .map(|i| {
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / k as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn star_polygon(r: f64) -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / 10.0;
            let rr = if i % 2 == 0 { r } else { r * STAR_INNER_RATIO };
            (rr * a.cos(), rr * a.sin())
        })
        .collect()
}

/// Inradius as a fraction of the outer radius, per shape; sets the scale
/// factor that turns an outline into the inner boundary of an
/// `empty`-texture ring of the configured stroke width.
fn inradius_fraction(shape: Shape) -> f64 {
    match shape {
        Shape::Circle => 1.0,
        Shape::Square => 1.0,
        Shape::Triangle => 0.5,
        Shape::Hexagon => 3f64.sqrt() / 2.0,
        // Distance from the center to the nearest edge of the
        // {outer=1, inner=0.5} star polygon.
        Shape::Star => 0.4426,
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Glyph {
    outer: Outline,
    inner: Option<Outline>,
    extent: f64,
}

impl Glyph {
    pub(crate) fn new(shape: Shape, texture: Texture, r: f64, stroke: f64) -> Glyph {
        let outer = match shape {
            Shape::Circle => Outline::Circle { r },
            Shape::Square => Outline::Square { r },
            Shape::Triangle => Outline::Poly { pts: regular_polygon(3, r) },
            Shape::Hexagon => Outline::Poly { pts: regular_polygon(6, r) },
            Shape::Star => Outline::Poly { pts: star_polygon(r) },
        };
        let inner = match texture {
            Texture::Full => None,
            Texture::Empty => {
                let s = (1.0 - stroke / (r * inradius_fraction(shape))).max(0.0);
                Some(outer.scaled(s))
            }
        };
        Glyph { outer, inner, extent: r }
    }

    pub(crate) fn extent(&self) -> f64 {
        self.extent
    }

    pub(crate) fn contains(&self, dx: f64, dy: f64) -> bool {
        if !self.outer.contains(dx, dy) {
            return false;
        }
        match &self.inner {
            None => true,
            Some(inner) => !inner.contains(dx, dy),
        }
    }
}

/// Rasterizes one scene. Later elements draw over earlier ones.
pub fn render(scene: &Scene, cfg: &RenderConfig) -> Result<RgbImage> {
    cfg.validate()?;
    let n = cfg.canvas_px;
    let mut img = RgbImage::from_pixel(n, n, image::Rgb(WHITE));
    for el in &scene.elements {
        draw_element(&mut img, el, cfg);
    }
    Ok(img)
}

fn draw_element(img: &mut RgbImage, el: &PlacedElement, cfg: &RenderConfig) {
    let n = cfg.canvas_px as i64;
    let r = cfg.radius_for(el.spec.size);
    let glyph = Glyph::new(el.spec.shape, el.spec.texture, r, cfg.stroke_px);
    let cx = el.center.0 * cfg.canvas_px as f64;
    let cy = el.center.1 * cfg.canvas_px as f64;
    let color = image::Rgb(cfg.color_rgb(el.spec.color));
    let lo_x = ((cx - r - 1.0).floor() as i64).max(0);
    let hi_x = ((cx + r + 1.0).ceil() as i64).min(n - 1);
    let lo_y = ((cy - r - 1.0).floor() as i64).max(0);
    let hi_y = ((cy + r + 1.0).ceil() as i64).min(n - 1);
    for py in lo_y..=hi_y {
        for px in lo_x..=hi_x {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            if glyph.contains(dx, dy) {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset materialization
// ---------------------------------------------------------------------------

/// One manifest line: everything needed to re-create and verify the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub file: String,
    pub caption: String,
    pub label: SamplingLabel,
    pub elements: Vec<PlacedElement>,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn empty_count(&self) -> usize {
        self.entries.iter().filter(|e| e.label == SamplingLabel::Empty).count()
    }

    pub fn pair_count(&self, rule_index: usize) -> usize {
        self.entries
            .iter()
            .filter(|e| e.label == SamplingLabel::Pair(rule_index))
            .count()
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEC_SNAPSHOT_FILE: &str = "spec.toml";
pub const RENDER_SNAPSHOT_FILE: &str = "render.toml";
pub const IMAGES_DIR: &str = "images";
const INCOMPLETE_MARKER: &str = "INCOMPLETE";

pub fn image_file_name(index: usize) -> String {
    format!("{IMAGES_DIR}/{index:06}.png")
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders and writes the whole dataset: `out_dir/images/{index:06}.png`,
/// one JSONL manifest line per image, and spec/render snapshots.
///
/// Re-running on a partially written directory resumes: entries whose file
/// checksum still matches are kept, everything after the first mismatch is
/// regenerated. Identical spec and seed produce byte-identical manifests.
pub fn materialize_dataset(
    spec: &DatasetSpec,
    cfg: &RenderConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    cfg.validate()?;
    if spec.position_margin < cfg.min_margin() {
        return Err(Error::InvalidSpec(format!(
            "position_margin {} below the render config's minimum {}",
            spec.position_margin,
            cfg.min_margin()
        )));
    }
    fs::create_dir_all(out_dir.join(IMAGES_DIR)).map_err(|e| Error::io(out_dir, e))?;
    write_snapshot(out_dir, SPEC_SNAPSHOT_FILE, &spec.to_toml()?)?;
    write_snapshot(out_dir, RENDER_SNAPSHOT_FILE, &toml::to_string_pretty(cfg)?)?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut entries = verified_prefix(&manifest_path, out_dir, spec.num_images)?;
    let start = entries.len();
    if start < spec.num_images {
        mark_incomplete(out_dir, start)?;
    }

    // Rewrite the manifest up to the verified prefix, then append.
    let mut writer = std::io::BufWriter::new(
        fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    );
    for e in &entries {
        writeln!(writer, "{}", serde_json::to_string(e)?)
            .map_err(|e| Error::io(&manifest_path, e))?;
    }

    let scenes = sample_many(spec, cfg.canvas_px, spec.num_images)?;
    for (index, (scene, label)) in scenes.into_iter().enumerate().skip(start) {
        let entry = write_image_entry(out_dir, index, &scene, label, cfg).map_err(|err| {
            let _ = writer.flush();
            match err {
                Error::Io { path, source } => Error::PartialProgress {
                    next_index: index,
                    message: format!("{}: {source}", path.display()),
                },
                other => other,
            }
        })?;
        writeln!(writer, "{}", serde_json::to_string(&entry)?)
            .map_err(|e| Error::io(&manifest_path, e))?;
        entries.push(entry);
    }
    writer.flush().map_err(|e| Error::io(&manifest_path, e))?;
    let _ = fs::remove_file(out_dir.join(INCOMPLETE_MARKER));
    Ok(Manifest { entries })
}

fn write_snapshot(out_dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = out_dir.join(name);
    if path.exists() {
        let existing = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if existing != content {
            return Err(Error::InvalidSpec(format!(
                "{} already exists with a different configuration; refusing to mix datasets",
                path.display()
            )));
        }
        return Ok(());
    }
    fs::write(&path, content).map_err(|e| Error::io(&path, e))
}

fn mark_incomplete(out_dir: &Path, next_index: usize) -> Result<()> {
    let path = out_dir.join(INCOMPLETE_MARKER);
    fs::write(&path, format!("{next_index}\n")).map_err(|e| Error::io(&path, e))
}

fn write_image_entry(
    out_dir: &Path,
    index: usize,
    scene: &Scene,
    label: SamplingLabel,
    cfg: &RenderConfig,
) -> Result<ManifestEntry> {
    let img = render(scene, cfg)?;
    let bytes = png_bytes(&img)?;
    let file = image_file_name(index);
    let path = out_dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(ManifestEntry {
        index,
        file,
        caption: caption(scene),
        label,
        elements: scene.elements.clone(),
        sha256: sha256_hex(&bytes),
    })
}

/// Reads an existing manifest and returns the prefix whose image files are
/// present with matching checksums.
fn verified_prefix(
    manifest_path: &Path,
    out_dir: &Path,
    limit: usize,
) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    if !manifest_path.exists() {
        return Ok(entries);
    }
    let file = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = match serde_json::from_str(&line) {
            Ok(e) => e,
            Err(_) => break,
        };
        if entry.index != entries.len() || entry.index >= limit {
            break;
        }
        let img_path = out_dir.join(&entry.file);
        match fs::read(&img_path) {
            Ok(bytes) if sha256_hex(&bytes) == entry.sha256 => entries.push(entry),
            _ => break,
        }
    }
    Ok(entries)
}

/// Loads a previously materialized manifest.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(Manifest { entries })
}

/// Loads the render config snapshot stored with a dataset.
pub fn load_render_snapshot(dir: &Path) -> Result<RenderConfig> {
    let path = dir.join(RENDER_SNAPSHOT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(toml::from_str(&text)?)
}

/// Loads the dataset spec snapshot stored with a dataset.
pub fn load_spec_snapshot(dir: &Path) -> Result<DatasetSpec> {
    let path = dir.join(SPEC_SNAPSHOT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(toml::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Color, ElementSpec, ElementSpace, Size};

    fn spec_one(center: (f64, f64), spec: ElementSpec) -> Scene {
        Scene { elements: vec![PlacedElement { spec, center }], canvas_px: 64 }
    }

    #[test]
    fn empty_scene_renders_all_white() {
        let img = render(&Scene::empty(64), &RenderConfig::default()).unwrap();
        assert!(img.pixels().all(|p| p.0 == WHITE));
    }

    #[test]
    fn centered_red_disc_has_palette_center() {
        let cfg = RenderConfig::default();
        let scene = spec_one(
            (0.5, 0.5),
            ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Circle),
        );
        let img = render(&scene, &cfg).unwrap();
        assert_eq!(img.get_pixel(32, 32).0, cfg.palette[0]);
        // Interior pixels are exactly the palette color.
        assert_eq!(img.get_pixel(35, 30).0, cfg.palette[0]);
        // Far corner stays white.
        assert_eq!(img.get_pixel(1, 1).0, WHITE);
    }

    #[test]
    fn empty_texture_leaves_interior_white() {
        let cfg = RenderConfig::default();
        for shape in Shape::ALL {
            let scene = spec_one(
                (0.5, 0.5),
                ElementSpec::new(Size::Big, Color::Blue, Texture::Empty, *shape),
            );
            let img = render(&scene, &cfg).unwrap();
            assert_eq!(
                img.get_pixel(32, 32).0,
                WHITE,
                "center of empty {shape} should stay white"
            );
            let colored = img.pixels().filter(|p| p.0 != WHITE).count();
            assert!(colored > 0, "empty {shape} must draw an outline");
        }
    }

    #[test]
    fn full_glyphs_color_the_center() {
        let cfg = RenderConfig::default();
        for shape in Shape::ALL {
            for size in Size::ALL {
                let scene = spec_one(
                    (0.5, 0.5),
                    ElementSpec::new(*size, Color::Green, Texture::Full, *shape),
                );
                let img = render(&scene, &cfg).unwrap();
                assert_eq!(img.get_pixel(32, 32).0, cfg.palette[1], "{size} {shape}");
            }
        }
    }

    #[test]
    fn later_elements_draw_over_earlier() {
        let cfg = RenderConfig::default();
        let a = ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Circle);
        let b = ElementSpec::new(Size::Big, Color::Blue, Texture::Full, Shape::Circle);
        let scene = Scene {
            elements: vec![
                PlacedElement { spec: a, center: (0.5, 0.5) },
                PlacedElement { spec: b, center: (0.5, 0.5) },
            ],
            canvas_px: 64,
        };
        let img = render(&scene, &cfg).unwrap();
        assert_eq!(img.get_pixel(32, 32).0, cfg.palette[2]);
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = RenderConfig::default();
        let scene = spec_one(
            (0.41231, 0.63327),
            ElementSpec::new(Size::Small, Color::Green, Texture::Empty, Shape::Star),
        );
        let a = png_bytes(&render(&scene, &cfg).unwrap()).unwrap();
        let b = png_bytes(&render(&scene, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn glyphs_stay_inside_canvas_at_margin() {
        let cfg = RenderConfig::default();
        let margin = 0.25;
        for &(x, y) in &[(margin, margin), (1.0 - margin, margin), (margin, 1.0 - margin)] {
            let scene = spec_one(
                (x, y),
                ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Square),
            );
            let img = render(&scene, &cfg).unwrap();
            let n = cfg.canvas_px - 1;
            for i in 0..cfg.canvas_px {
                assert_eq!(img.get_pixel(i, 0).0, WHITE);
                assert_eq!(img.get_pixel(i, n).0, WHITE);
                assert_eq!(img.get_pixel(0, i).0, WHITE);
                assert_eq!(img.get_pixel(n, i).0, WHITE);
            }
        }
    }

    #[test]
    fn materialize_writes_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            space: ElementSpace::minimal(),
            num_images: 12,
            empty_fraction: 0.25,
            max_elements: 2,
            leave_out: vec![],
            pair_rules: vec![],
            seed: 11,
            position_margin: 0.25,
            fixed_pair_positions: None,
        };
        let cfg = RenderConfig::for_canvas(32);
        let manifest = materialize_dataset(&spec, &cfg, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 12);
        let first_bytes = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();

        // Corrupt one image; re-run must regenerate from that point and end
        // byte-identical.
        fs::write(dir.path().join(image_file_name(7)), b"junk").unwrap();
        let again = materialize_dataset(&spec, &cfg, dir.path()).unwrap();
        assert_eq!(again.entries, manifest.entries);
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), first_bytes);
        for e in &again.entries {
            let bytes = fs::read(dir.path().join(&e.file)).unwrap();
            assert_eq!(sha256_hex(&bytes), e.sha256);
        }
        assert!(!dir.path().join(INCOMPLETE_MARKER).exists());
    }

    #[test]
    fn zero_image_dataset_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            space: ElementSpace::minimal(),
            num_images: 0,
            empty_fraction: 0.1,
            max_elements: 2,
            leave_out: vec![],
            pair_rules: vec![],
            seed: 1,
            position_margin: 0.25,
            fixed_pair_positions: None,
        };
        let manifest =
            materialize_dataset(&spec, &RenderConfig::for_canvas(32), dir.path()).unwrap();
        assert!(manifest.entries.is_empty());
        assert!(dir.path().join(MANIFEST_FILE).exists());
    }
}
