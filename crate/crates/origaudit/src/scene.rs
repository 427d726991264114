//! Element grammar, element spaces, scene sampling, and captioning.
//!
//! An *element* is one geometric glyph described along four axes: size,
//! color, texture, and shape type. A *scene* is a list of positioned
//! elements on a square white canvas. Datasets are drawn from a
//! [`DatasetSpec`]: a declarative recipe fixing the element space, the
//! empty-image fraction, engineered pair frequencies, and a leave-out set
//! whose members never appear in any sampled scene.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Attribute axes
// ---------------------------------------------------------------------------

macro_rules! attribute_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(word: &str) -> Option<Self> {
                match word {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

attribute_enum!(Shape {
    Square => "square",
    Circle => "circle",
    Triangle => "triangle",
    Hexagon => "hexagon",
    Star => "star",
});

attribute_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
});

attribute_enum!(Size {
    Big => "big",
    Small => "small",
});

attribute_enum!(Texture {
    Full => "full",
    Empty => "empty",
});

// ---------------------------------------------------------------------------
// ElementSpec / ElementSpace
// ---------------------------------------------------------------------------

/// One geometric element: the conjunction of all four attribute axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ElementSpec {
    pub size: Size,
    pub color: Color,
    pub texture: Texture,
    pub shape: Shape,
}

impl ElementSpec {
    pub fn new(size: Size, color: Color, texture: Texture, shape: Shape) -> Self {
        ElementSpec { size, color, texture, shape }
    }

    /// The canonical caption phrase, e.g. `"big red full circle"`.
    pub fn phrase(&self) -> String {
        format!("{} {} {} {}", self.size, self.color, self.texture, self.shape)
    }
}

impl fmt::Display for ElementSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.phrase())
    }
}

/// A cross product of attribute values; its cardinality is the diversity
/// knob of the synthetic framework (4 up to 60 unique elements).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementSpace {
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub sizes: Vec<Size>,
    pub textures: Vec<Texture>,
}

impl ElementSpace {
    /// The maximal space: 5 shapes x 3 colors x 2 sizes x 2 textures = 60.
    pub fn maximal() -> Self {
        ElementSpace {
            shapes: Shape::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            sizes: Size::ALL.to_vec(),
            textures: Texture::ALL.to_vec(),
        }
    }

    /// The minimal diversity space of the generalization ladder:
    /// {square, circle} x {red, blue} x {big} x {full} = 4.
    pub fn minimal() -> Self {
        ElementSpace {
            shapes: vec![Shape::Square, Shape::Circle],
            colors: vec![Color::Red, Color::Blue],
            sizes: vec![Size::Big],
            textures: vec![Texture::Full],
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn check<T: PartialEq + fmt::Debug>(axis: &str, values: &[T]) -> Result<()> {
            if values.is_empty() {
                return Err(Error::InvalidSpace(format!("axis {axis} is empty")));
            }
            for (i, v) in values.iter().enumerate() {
                if values[..i].contains(v) {
                    return Err(Error::InvalidSpace(format!(
                        "axis {axis} repeats value {v:?}"
                    )));
                }
            }
            Ok(())
        }
        check("shapes", &self.shapes)?;
        check("colors", &self.colors)?;
        check("sizes", &self.sizes)?;
        check("textures", &self.textures)
    }

    pub fn cardinality(&self) -> usize {
        self.shapes.len() * self.colors.len() * self.sizes.len() * self.textures.len()
    }

    pub fn contains(&self, spec: &ElementSpec) -> bool {
        self.shapes.contains(&spec.shape)
            && self.colors.contains(&spec.color)
            && self.sizes.contains(&spec.size)
            && self.textures.contains(&spec.texture)
    }
}

/// Enumerates the full cross product of `space` in deterministic order:
/// lexicographic over the axes (size, color, texture, shape), each axis in
/// its declared order.
pub fn enumerate_space(space: &ElementSpace) -> Result<Vec<ElementSpec>> {
    space.validate()?;
    let mut out = Vec::with_capacity(space.cardinality());
    for &size in &space.sizes {
        for &color in &space.colors {
            for &texture in &space.textures {
                for &shape in &space.shapes {
                    out.push(ElementSpec { size, color, texture, shape });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

/// An element with a position, in normalized canvas coordinates `[0,1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedElement {
    pub spec: ElementSpec,
    pub center: (f64, f64),
}

/// A set of positioned elements on a square canvas. Element order is the
/// sampling (insertion) order; the caption follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub elements: Vec<PlacedElement>,
    pub canvas_px: u32,
}

impl Scene {
    pub fn empty(canvas_px: u32) -> Self {
        Scene { elements: Vec::new(), canvas_px }
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// The multiset of element specs, as sorted counts.
    pub fn multiset(&self) -> BTreeMap<ElementSpec, usize> {
        let mut m = BTreeMap::new();
        for el in &self.elements {
            *m.entry(el.spec).or_insert(0) += 1;
        }
        m
    }
}

/// Deterministic caption: each element rendered as
/// `"<size> <color> <texture> <shape>"`, joined by `" and "` in element
/// order. The empty scene captions to the empty string (the unconditioned
/// prompt convention).
pub fn caption(scene: &Scene) -> String {
    scene
        .elements
        .iter()
        .map(|el| el.spec.phrase())
        .collect::<Vec<_>>()
        .join(" and ")
}

/// The minimal descriptive phrase for `spec` within `space`: only the
/// attribute words whose axis has more than one value are included, in
/// caption word order. A 2-shape/2-color space yields `"blue circle"`; the
/// maximal space yields the full `"big blue full circle"`.
pub fn element_prompt(spec: &ElementSpec, space: &ElementSpace) -> Result<String> {
    space.validate()?;
    if !space.contains(spec) {
        return Err(Error::NotInSpace(spec.phrase()));
    }
    let mut words = Vec::new();
    if space.sizes.len() > 1 {
        words.push(spec.size.word());
    }
    if space.colors.len() > 1 {
        words.push(spec.color.word());
    }
    if space.textures.len() > 1 {
        words.push(spec.texture.word());
    }
    if space.shapes.len() > 1 {
        words.push(spec.shape.word());
    }
    Ok(words.join(" "))
}

/// Parses text produced by the [`caption`] / [`element_prompt`] grammar back
/// into a multiset of element specs.
///
/// Attribute words may be omitted (prompts for reduced spaces drop the
/// single-valued axes); omitted axes default to the first value of the
/// maximal axis (big, red, full, square). `parse_caption(caption(s))` always
/// recovers `s`'s exact multiset since captions spell all four words.
pub fn parse_caption(text: &str) -> Result<BTreeMap<ElementSpec, usize>> {
    let mut out = BTreeMap::new();
    if text.trim().is_empty() {
        return Ok(out);
    }
    let mut pos = 0usize;
    for part in text.split(" and ") {
        let spec = parse_element_phrase(part, pos)?;
        *out.entry(spec).or_insert(0) += 1;
        pos += part.len() + " and ".len();
    }
    Ok(out)
}

fn parse_element_phrase(part: &str, base: usize) -> Result<ElementSpec> {
    let mut size = None;
    let mut color = None;
    let mut texture = None;
    let mut shape = None;
    if part.trim().is_empty() {
        return Err(Error::CaptionParse {
            position: base,
            message: "empty element phrase".into(),
        });
    }
    let mut offset = 0usize;
    for word in part.split_whitespace() {
        let found = part[offset..].find(word).map(|o| offset + o).unwrap_or(offset);
        let position = base + found;
        offset = found + word.len();
        if let Some(v) = Size::from_word(word) {
            assign_once(&mut size, v, "size", position)?;
        } else if let Some(v) = Color::from_word(word) {
            assign_once(&mut color, v, "color", position)?;
        } else if let Some(v) = Texture::from_word(word) {
            assign_once(&mut texture, v, "texture", position)?;
        } else if let Some(v) = Shape::from_word(word) {
            assign_once(&mut shape, v, "shape", position)?;
        } else {
            return Err(Error::CaptionParse {
                position,
                message: format!("unknown word {word:?}"),
            });
        }
    }
    Ok(ElementSpec {
        size: size.unwrap_or(Size::Big),
        color: color.unwrap_or(Color::Red),
        texture: texture.unwrap_or(Texture::Full),
        shape: shape.unwrap_or(Shape::Square),
    })
}

fn assign_once<T>(slot: &mut Option<T>, value: T, axis: &str, position: usize) -> Result<()> {
    if slot.is_some() {
        return Err(Error::CaptionParse {
            position,
            message: format!("duplicate {axis} word"),
        });
    }
    *slot = Some(value);
    Ok(())
}

// ---------------------------------------------------------------------------
// DatasetSpec + sampling
// ---------------------------------------------------------------------------

/// An engineered co-occurrence rule: a pair of shape types that must appear
/// together in `frequency` of all sampled images (unconditionally, counting
/// empty images in the denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRule {
    pub shapes: (Shape, Shape),
    pub frequency: f64,
}

/// How a scene was drawn; recorded per manifest entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingLabel {
    Empty,
    /// Index into `DatasetSpec::pair_rules`.
    Pair(usize),
    Background,
}

fn default_margin() -> f64 {
    0.25
}

/// Declarative dataset recipe. Serializes to a human-readable TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub space: ElementSpace,
    pub num_images: usize,
    /// Probability that an image is empty (white canvas, empty caption).
    pub empty_fraction: f64,
    /// Non-empty scenes hold between 1 and `max_elements` elements.
    pub max_elements: usize,
    /// Element conjunctions withheld from every sampled scene.
    #[serde(default)]
    pub leave_out: Vec<ElementSpec>,
    #[serde(default)]
    pub pair_rules: Vec<PairRule>,
    pub seed: u64,
    /// Margin (normalized) kept between element centers and the canvas
    /// border so glyphs stay fully inside. Must cover the render config's
    /// glyph extent.
    #[serde(default = "default_margin")]
    pub position_margin: f64,
    /// When set, pair-rule elements are placed at these fixed centers
    /// instead of uniform positions (the fixed-location ablation variant).
    #[serde(default)]
    pub fixed_pair_positions: Option<Vec<(f64, f64)>>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return Err(Error::InvalidSpec(format!(
                "empty_fraction {} outside [0,1]",
                self.empty_fraction
            )));
        }
        if self.max_elements == 0 {
            return Err(Error::InvalidSpec("max_elements must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.position_margin) {
            return Err(Error::InvalidSpec(format!(
                "position_margin {} outside [0, 0.5)",
                self.position_margin
            )));
        }
        let mut freq_sum = 0.0;
        for rule in &self.pair_rules {
            if !(0.0..=1.0).contains(&rule.frequency) {
                return Err(Error::InvalidSpec(format!(
                    "pair frequency {} outside [0,1]",
                    rule.frequency
                )));
            }
            freq_sum += rule.frequency;
        }
        if freq_sum > 1.0 - self.empty_fraction + 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "pair frequencies sum to {freq_sum}, exceeding the non-empty mass {}",
                1.0 - self.empty_fraction
            )));
        }
        if !self.pair_rules.is_empty() && self.max_elements < 2 {
            return Err(Error::InvalidSpec(
                "pair rules require max_elements >= 2".into(),
            ));
        }
        if let Some(pos) = &self.fixed_pair_positions {
            if pos.len() < 2 {
                return Err(Error::InvalidSpec(
                    "fixed_pair_positions needs at least two centers".into(),
                ));
            }
        }
        // Every pair shape must have at least one non-left-out attribute combo.
        let plan = SamplingPlan::new(self)?;
        let _ = plan;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DatasetSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Precomputed candidate lists for one `DatasetSpec`.
///
/// Sampling scheme: a categorical label is drawn per image (empty first,
/// then pair rules at their unconditional frequencies, remainder
/// background). Pair images hold the rule's two shapes plus background
/// fills; the shapes named by any pair rule are "constrained": background
/// images carry at most one constrained-shape element, and pair fills carry
/// none, so engineered pair frequencies are exact in expectation.
struct SamplingPlan {
    /// Cumulative label boundaries: empty, then one per pair rule.
    label_cdf: Vec<f64>,
    /// All space elements minus leave-out.
    allowed: Vec<ElementSpec>,
    /// `allowed` minus constrained shapes.
    allowed_unconstrained: Vec<ElementSpec>,
    /// Per pair rule, per side: allowed attribute completions of that shape.
    pair_candidates: Vec<[Vec<ElementSpec>; 2]>,
    constrained: Vec<Shape>,
}

impl SamplingPlan {
    fn new(spec: &DatasetSpec) -> Result<Self> {
        let all = enumerate_space(&spec.space)?;
        let allowed: Vec<ElementSpec> = all
            .iter()
            .copied()
            .filter(|e| !spec.leave_out.contains(e))
            .collect();
        if allowed.is_empty() && spec.empty_fraction < 1.0 {
            return Err(Error::InvalidSpec(
                "leave_out excludes the entire element space".into(),
            ));
        }
        let mut constrained: Vec<Shape> = Vec::new();
        for rule in &spec.pair_rules {
            for s in [rule.shapes.0, rule.shapes.1] {
                if !constrained.contains(&s) {
                    constrained.push(s);
                }
            }
        }
        let allowed_unconstrained: Vec<ElementSpec> = allowed
            .iter()
            .copied()
            .filter(|e| !constrained.contains(&e.shape))
            .collect();
        let mut pair_candidates = Vec::new();
        for rule in &spec.pair_rules {
            let mut sides: [Vec<ElementSpec>; 2] = [Vec::new(), Vec::new()];
            for (i, shape) in [rule.shapes.0, rule.shapes.1].into_iter().enumerate() {
                sides[i] = allowed.iter().copied().filter(|e| e.shape == shape).collect();
                if rule.frequency > 0.0 && sides[i].is_empty() {
                    return Err(Error::InfeasiblePairRules(format!(
                        "no allowed attribute combination for shape {shape}"
                    )));
                }
            }
            pair_candidates.push(sides);
        }
        let mut label_cdf = vec![spec.empty_fraction];
        let mut acc = spec.empty_fraction;
        for rule in &spec.pair_rules {
            acc += rule.frequency;
            label_cdf.push(acc);
        }
        Ok(SamplingPlan {
            label_cdf,
            allowed,
            allowed_unconstrained,
            pair_candidates,
            constrained,
        })
    }
}

fn uniform_pick<T: Copy>(items: &[T], rng: &mut impl Rng) -> T {
    items[rng.gen_range(0..items.len())]
}

fn sample_position(margin: f64, rng: &mut impl Rng) -> (f64, f64) {
    let x = rng.gen_range(margin..=1.0 - margin);
    let y = rng.gen_range(margin..=1.0 - margin);
    (x, y)
}

/// Draws one scene from `spec` using `rng`. Identical spec and rng state
/// yield identical scenes.
pub fn sample_scene(spec: &DatasetSpec, canvas_px: u32, rng: &mut impl Rng) -> Result<Scene> {
    Ok(sample_scene_labeled(spec, canvas_px, rng)?.0)
}

/// Like [`sample_scene`] but also reports how the scene was drawn.
pub fn sample_scene_labeled(
    spec: &DatasetSpec,
    canvas_px: u32,
    rng: &mut impl Rng,
) -> Result<(Scene, SamplingLabel)> {
    let plan = SamplingPlan::new(spec)?;
    sample_with_plan(spec, &plan, canvas_px, rng)
}

fn sample_with_plan(
    spec: &DatasetSpec,
    plan: &SamplingPlan,
    canvas_px: u32,
    rng: &mut impl Rng,
) -> Result<(Scene, SamplingLabel)> {
    let u: f64 = rng.gen();
    let label = {
        let mut label = SamplingLabel::Background;
        for (i, bound) in plan.label_cdf.iter().enumerate() {
            if u < *bound {
                label = if i == 0 { SamplingLabel::Empty } else { SamplingLabel::Pair(i - 1) };
                break;
            }
        }
        label
    };
    let margin = spec.position_margin;
    let mut elements = Vec::new();
    match label {
        SamplingLabel::Empty => {}
        SamplingLabel::Pair(rule_idx) => {
            let count = rng.gen_range(1..=spec.max_elements).max(2);
            for side in 0..2 {
                let spec_el = uniform_pick(&plan.pair_candidates[rule_idx][side], rng);
                let center = match &spec.fixed_pair_positions {
                    Some(fixed) => fixed[side],
                    None => sample_position(margin, rng),
                };
                elements.push(PlacedElement { spec: spec_el, center });
            }
            // Fills never reuse a constrained shape, so no second engineered
            // pair can appear by accident.
            for _ in 2..count {
                if plan.allowed_unconstrained.is_empty() {
                    break;
                }
                let spec_el = uniform_pick(&plan.allowed_unconstrained, rng);
                elements.push(PlacedElement {
                    spec: spec_el,
                    center: sample_position(margin, rng),
                });
            }
        }
        SamplingLabel::Background => {
            let count = rng.gen_range(1..=spec.max_elements);
            let mut used_constrained = false;
            for _ in 0..count {
                let pool: &[ElementSpec] = if used_constrained && !plan.constrained.is_empty() {
                    if plan.allowed_unconstrained.is_empty() {
                        break;
                    }
                    &plan.allowed_unconstrained
                } else {
                    &plan.allowed
                };
                let spec_el = uniform_pick(pool, rng);
                if plan.constrained.contains(&spec_el.shape) {
                    used_constrained = true;
                }
                elements.push(PlacedElement {
                    spec: spec_el,
                    center: sample_position(margin, rng),
                });
            }
        }
    }
    Ok((Scene { elements, canvas_px }, label))
}

/// Samples scene `index` of the dataset: every index owns an independent,
/// reproducible RNG stream derived from `spec.seed`.
pub fn sample_indexed(
    spec: &DatasetSpec,
    canvas_px: u32,
    index: u64,
) -> Result<(Scene, SamplingLabel)> {
    let plan = SamplingPlan::new(spec)?;
    sample_indexed_with(spec, &plan, canvas_px, index)
}

fn sample_indexed_with(
    spec: &DatasetSpec,
    plan: &SamplingPlan,
    canvas_px: u32,
    index: u64,
) -> Result<(Scene, SamplingLabel)> {
    let mut rng = crate::indexed_rng(spec.seed, index);
    sample_with_plan(spec, plan, canvas_px, &mut rng)
}

/// Samples the label+scene stream for indices `0..n` reusing one plan.
pub fn sample_many(
    spec: &DatasetSpec,
    canvas_px: u32,
    n: usize,
) -> Result<Vec<(Scene, SamplingLabel)>> {
    spec.validate()?;
    let plan = SamplingPlan::new(spec)?;
    (0..n as u64)
        .map(|i| sample_indexed_with(spec, &plan, canvas_px, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maximal_space_has_60_elements() {
        let all = enumerate_space(&ElementSpace::maximal()).unwrap();
        assert_eq!(all.len(), 60);
        // Deterministic order and no duplicates.
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 60);
    }

    #[test]
    fn minimal_space_has_4_elements() {
        let all = enumerate_space(&ElementSpace::minimal()).unwrap();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn singleton_space_enumerates_once() {
        let space = ElementSpace {
            shapes: vec![Shape::Circle],
            colors: vec![Color::Red],
            sizes: vec![Size::Big],
            textures: vec![Texture::Full],
        };
        let all = enumerate_space(&space).unwrap();
        assert_eq!(
            all,
            vec![ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Circle)]
        );
    }

    #[test]
    fn empty_axis_is_rejected() {
        let space = ElementSpace { shapes: vec![], ..ElementSpace::maximal() };
        assert!(matches!(enumerate_space(&space), Err(Error::InvalidSpace(_))));
    }

    fn two_element_scene() -> Scene {
        Scene {
            elements: vec![
                PlacedElement {
                    spec: ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Circle),
                    center: (0.3, 0.4),
                },
                PlacedElement {
                    spec: ElementSpec::new(Size::Small, Color::Blue, Texture::Empty, Shape::Square),
                    center: (0.7, 0.6),
                },
            ],
            canvas_px: 64,
        }
    }

    #[test]
    fn caption_matches_reference_format() {
        // Word order within an element is size color texture shape.
        assert_eq!(
            caption(&two_element_scene()),
            "big red full circle and small blue empty square"
        );
        assert_eq!(caption(&Scene::empty(64)), "");
    }

    #[test]
    fn element_prompt_includes_only_discriminating_axes() {
        let minimal = ElementSpace::minimal();
        let blue_circle = ElementSpec::new(Size::Big, Color::Blue, Texture::Full, Shape::Circle);
        assert_eq!(element_prompt(&blue_circle, &minimal).unwrap(), "blue circle");
        assert_eq!(
            element_prompt(&blue_circle, &ElementSpace::maximal()).unwrap(),
            "big blue full circle"
        );
        let singleton = ElementSpace {
            shapes: vec![Shape::Circle],
            colors: vec![Color::Blue],
            sizes: vec![Size::Big],
            textures: vec![Texture::Full],
        };
        assert_eq!(element_prompt(&blue_circle, &singleton).unwrap(), "");
        let red_star = ElementSpec::new(Size::Big, Color::Red, Texture::Full, Shape::Star);
        assert!(matches!(element_prompt(&red_star, &minimal), Err(Error::NotInSpace(_))));
    }

    #[test]
    fn parse_caption_round_trips() {
        let scene = two_element_scene();
        assert_eq!(parse_caption(&caption(&scene)).unwrap(), scene.multiset());
        assert!(parse_caption("").unwrap().is_empty());
        let single = parse_caption("big red full circle").unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn parse_caption_reports_position_on_error() {
        match parse_caption("big red full circle and big purple full square") {
            Err(Error::CaptionParse { position, .. }) => assert_eq!(position, 28),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_prompt_defaults_missing_axes() {
        let parsed = parse_caption("blue circle").unwrap();
        let expected = ElementSpec::new(Size::Big, Color::Blue, Texture::Full, Shape::Circle);
        assert_eq!(parsed.into_iter().next().unwrap(), (expected, 1));
    }

    fn base_spec() -> DatasetSpec {
        DatasetSpec {
            space: ElementSpace::maximal(),
            num_images: 100,
            empty_fraction: 0.1,
            max_elements: 3,
            leave_out: vec![],
            pair_rules: vec![],
            seed: 7,
            position_margin: 0.25,
            fixed_pair_positions: None,
        }
    }

    #[test]
    fn empty_fraction_one_always_empty() {
        let spec = DatasetSpec { empty_fraction: 1.0, ..base_spec() };
        for (scene, label) in sample_many(&spec, 64, 50).unwrap() {
            assert!(scene.is_empty());
            assert_eq!(label, SamplingLabel::Empty);
        }
    }

    #[test]
    fn leave_out_is_a_hard_exclusion() {
        let excluded = ElementSpec::new(Size::Big, Color::Blue, Texture::Full, Shape::Circle);
        let spec = DatasetSpec { leave_out: vec![excluded], ..base_spec() };
        for (scene, _) in sample_many(&spec, 64, 500).unwrap() {
            assert!(scene.elements.iter().all(|el| el.spec != excluded));
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let spec = base_spec();
        let a = sample_many(&spec, 64, 20).unwrap();
        let b = sample_many(&spec, 64, 20).unwrap();
        assert_eq!(a, b);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            sample_scene(&spec, 64, &mut r1).unwrap(),
            sample_scene(&spec, 64, &mut r2).unwrap()
        );
    }

    #[test]
    fn infeasible_pair_rules_error() {
        let mut spec = base_spec();
        spec.pair_rules = vec![PairRule { shapes: (Shape::Circle, Shape::Square), frequency: 0.3 }];
        // Exclude every circle variant.
        spec.leave_out = enumerate_space(&spec.space)
            .unwrap()
            .into_iter()
            .filter(|e| e.shape == Shape::Circle)
            .collect();
        assert!(matches!(spec.validate(), Err(Error::InfeasiblePairRules(_))));
    }

    #[test]
    fn pair_frequencies_must_fit_non_empty_mass() {
        let mut spec = base_spec();
        spec.pair_rules = vec![PairRule { shapes: (Shape::Circle, Shape::Square), frequency: 0.95 }];
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn pair_images_contain_the_pair_and_background_avoids_second_constrained() {
        let mut spec = base_spec();
        spec.max_elements = 4;
        spec.pair_rules = vec![
            PairRule { shapes: (Shape::Circle, Shape::Square), frequency: 0.3 },
            PairRule { shapes: (Shape::Circle, Shape::Triangle), frequency: 0.001 },
        ];
        for (scene, label) in sample_many(&spec, 64, 2000).unwrap() {
            let shapes: Vec<Shape> = scene.elements.iter().map(|e| e.spec.shape).collect();
            let n_constrained = shapes
                .iter()
                .filter(|s| matches!(s, Shape::Circle | Shape::Square | Shape::Triangle))
                .count();
            match label {
                SamplingLabel::Pair(0) => {
                    assert!(shapes.contains(&Shape::Circle) && shapes.contains(&Shape::Square));
                    assert_eq!(n_constrained, 2);
                }
                SamplingLabel::Pair(1) => {
                    assert!(shapes.contains(&Shape::Circle) && shapes.contains(&Shape::Triangle));
                    assert_eq!(n_constrained, 2);
                }
                SamplingLabel::Pair(_) => unreachable!(),
                SamplingLabel::Background => assert!(n_constrained <= 1),
                SamplingLabel::Empty => assert!(scene.is_empty()),
            }
            // The unseen pair (square, triangle) can never co-occur.
            assert!(!(shapes.contains(&Shape::Square) && shapes.contains(&Shape::Triangle)));
        }
    }

    #[test]
    fn dataset_spec_toml_round_trip() {
        let mut spec = base_spec();
        spec.pair_rules = vec![PairRule { shapes: (Shape::Circle, Shape::Square), frequency: 0.3 }];
        let text = spec.to_toml().unwrap();
        assert_eq!(DatasetSpec::from_toml(&text).unwrap(), spec);
    }

    proptest! {
        #[test]
        fn caption_round_trip_holds_for_random_scenes(seed in 0u64..1_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = base_spec();
            let scene = sample_scene(&spec, 64, &mut rng).unwrap();
            prop_assert_eq!(parse_caption(&caption(&scene)).unwrap(), scene.multiset());
        }

        #[test]
        fn positions_respect_margin(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = base_spec();
            let scene = sample_scene(&spec, 64, &mut rng).unwrap();
            for el in &scene.elements {
                prop_assert!(el.center.0 >= spec.position_margin - 1e-12);
                prop_assert!(el.center.0 <= 1.0 - spec.position_margin + 1e-12);
                prop_assert!(el.center.1 >= spec.position_margin - 1e-12);
                prop_assert!(el.center.1 <= 1.0 - spec.position_margin + 1e-12);
            }
        }
    }
}
