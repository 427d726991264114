//! The originality experiment: train one model on the engineered
//! common/rare/unseen distribution, then sweep token counts per query and
//! histogram the minimum sufficient count per category.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::inversion::InversionConfig;
use crate::originality::{
    calibrate_threshold, originality_score, OriginalityScore, OriginalityThresholds,
    SceneJaccardMetric, TauCalibration,
};
use crate::plot::{grouped_histogram, SERIES_COLORS};
use crate::render::{load_manifest, render};
use crate::scene::{
    enumerate_space, DatasetSpec, ElementSpace, PlacedElement, SamplingLabel, Scene, Shape,
    Size, Texture,
};
use crate::stats::{median, sign_test_p_less};
use crate::{Error, Result};

use super::cache::{ensure_dataset, ensure_detector, ensure_model};
use super::report::{write_json, write_jsonl, write_text, EnvFingerprint};
use super::{ExperimentKind, ExperimentSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Common,
    Rare,
    Unseen,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Common, Category::Rare, Category::Unseen];

    fn tag(&self) -> &'static str {
        match self {
            Category::Common => "common",
            Category::Rare => "rare",
            Category::Unseen => "unseen",
        }
    }
}

/// One audited query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub category: Category,
    pub originality: OriginalityScore,
    /// Mean reconstruction score per explored m (ascending).
    pub recon_means: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryAggregate {
    pub category: Category,
    pub queries: usize,
    /// Counts over {1..=5, "5+"} (index 5 is "5+").
    pub histogram: [usize; 6],
    pub median_rank: f64,
    pub mode_tokens: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OriginalityStats {
    /// Median ranks ordered common <= rare <= unseen.
    pub category_ordering_holds: bool,
    pub mode_common_is_one: bool,
    /// Fraction of unseen queries scoring >= 4 tokens (or "5+").
    pub unseen_high_token_fraction: f64,
    /// Sign-test p-value that unseen reconstruction scores at m=5 are below
    /// m=1 (the monotone resource law).
    pub p_unseen_m5_below_m1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OriginalityExperimentReport {
    pub name: String,
    pub env: EnvFingerprint,
    pub spec: ExperimentSpec,
    pub tau: TauCalibration,
    pub queries: Vec<QueryRecord>,
    pub aggregates: Vec<CategoryAggregate>,
    pub stats: OriginalityStats,
}

/// Default query element space for the engineered distribution: all five
/// shapes, three colors, big and full only.
pub fn appendix_space() -> ElementSpace {
    ElementSpace {
        shapes: Shape::ALL.to_vec(),
        colors: crate::scene::Color::ALL.to_vec(),
        sizes: vec![Size::Big],
        textures: vec![Texture::Full],
    }
}

pub fn run_originality(spec: &ExperimentSpec, out_dir: &Path) -> Result<OriginalityExperimentReport> {
    if spec.kind != ExperimentKind::Originality {
        return Err(Error::InvalidConfig("spec kind is not originality".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("resolved_spec.toml"), &toml::to_string_pretty(spec)?)?;
    let render_cfg = crate::render::RenderConfig::for_canvas(spec.dataset.canvas_px);
    let space = spec.dataset.space.clone().unwrap_or_else(appendix_space);

    let dataset_spec = DatasetSpec {
        space: space.clone(),
        num_images: spec.dataset.num_images,
        empty_fraction: spec.dataset.empty_fraction,
        max_elements: spec.dataset.max_elements,
        leave_out: vec![],
        pair_rules: spec.dataset.pair_rules.clone(),
        seed: spec.seed ^ 0xda7a,
        position_margin: render_cfg.min_margin().max(0.25),
        fixed_pair_positions: None,
    };
    let dataset_dir = ensure_dataset(out_dir, &dataset_spec, &render_cfg)?;
    let (_, bundle) =
        ensure_model(out_dir, &dataset_dir, &spec.model, &render_cfg, spec.seed, true)?;

    // The metric and the in-distribution gate share the detector choice.
    let metric = SceneJaccardMetric::new(ensure_detector(
        out_dir,
        &dataset_dir,
        &render_cfg,
        &spec.detector,
        spec.seed,
    )?);
    let gate_detector =
        ensure_detector(out_dir, &dataset_dir, &render_cfg, &spec.detector, spec.seed)?;

    // Reconstruction gate: calibrated unless overridden.
    let tau_path = out_dir.join("tau.json");
    let tau = if let Some(t) = spec.calibration.tau_override {
        TauCalibration {
            tau: t,
            metric: metric.name_owned(),
            n_pairs: 0,
            seed: spec.seed,
            dataset: dataset_dir.display().to_string(),
        }
    } else if tau_path.exists() {
        serde_json::from_str(
            &std::fs::read_to_string(&tau_path).map_err(|e| Error::io(&tau_path, e))?,
        )?
    } else {
        let c = calibrate_threshold(
            &bundle,
            &dataset_dir,
            &metric,
            spec.calibration.n_pairs,
            spec.seed ^ 0x7a0,
        )?;
        write_json(&tau_path, &c)?;
        c
    };
    eprintln!("[origaudit] reconstruction gate tau = {:.4} ({})", tau.tau, tau.metric);

    let thresholds = OriginalityThresholds {
        tau: tau.tau,
        epsilon: spec.thresholds.epsilon,
        k_seeds: spec.thresholds.k_seeds,
        recon_n: spec.thresholds.recon_n,
    };
    let base_cfg = InversionConfig {
        steps: spec.inversion.steps,
        batch: spec.inversion.batch,
        lr: spec.inversion.lr,
        inference_steps: spec.inversion.inference_steps,
        seed: spec.seed ^ 0x111,
        ..InversionConfig::default()
    };

    let queries = select_queries(spec, &dataset_dir, &space, out_dir)?;
    let mut records = Vec::new();
    for (category, id, image) in &queries {
        let cache_dir = out_dir.join("queries").join(id);
        let report_path = cache_dir.join("report.json");
        let report = if report_path.exists() {
            crate::originality::OriginalityReport::load(&report_path)?
        } else {
            eprintln!("[origaudit] scoring query {id}");
            let r = originality_score(
                &bundle,
                image,
                id,
                spec.queries.m_min..=spec.queries.m_max,
                &thresholds,
                &base_cfg,
                &metric,
                &gate_detector,
                Some(&cache_dir),
            )?;
            r.save(&report_path)?;
            r
        };
        records.push(QueryRecord {
            id: id.clone(),
            category: *category,
            originality: report.originality,
            recon_means: report
                .per_m
                .iter()
                .filter_map(|p| p.reconstruction.as_ref().map(|r| (p.m, r.mean)))
                .collect(),
        });
    }

    write_jsonl(&out_dir.join("raw.jsonl"), &records)?;
    let report = assemble(spec, tau, records)?;
    emit(&report, out_dir)?;
    Ok(report)
}

impl SceneJaccardMetric {
    fn name_owned(&self) -> String {
        use crate::originality::PerceptualMetric as _;
        self.name().to_string()
    }
}

type Query = (Category, String, image::RgbImage);

/// Common and rare queries come from the training manifest (images carrying
/// the engineered pairs); unseen queries are freshly composed scenes
/// holding the never-co-occurring pair.
fn select_queries(
    spec: &ExperimentSpec,
    dataset_dir: &Path,
    space: &ElementSpace,
    out_dir: &Path,
) -> Result<Vec<Query>> {
    use rand::Rng;
    let manifest = load_manifest(dataset_dir)?;
    let render_cfg = crate::render::load_render_snapshot(dataset_dir)?;
    let dataset_spec = crate::render::load_spec_snapshot(dataset_dir)?;
    let mut rng = crate::indexed_rng(spec.seed, 0x9e);
    let k = spec.queries.per_category;
    let mut out = Vec::new();

    for (rule_idx, category) in [(0usize, Category::Common), (1, Category::Rare)] {
        let mut candidates: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == SamplingLabel::Pair(rule_idx))
            .map(|(i, _)| i)
            .collect();
        if candidates.len() < k {
            return Err(Error::InvalidConfig(format!(
                "only {} {} images in the dataset, need {k}; raise num_images or the pair frequency",
                candidates.len(),
                category.tag()
            )));
        }
        for i in (1..candidates.len()).rev() {
            candidates.swap(i, rng.gen_range(0..=i));
        }
        for (qi, &mi) in candidates.iter().take(k).enumerate() {
            let entry = &manifest.entries[mi];
            let img = image::open(dataset_dir.join(&entry.file))?.to_rgb8();
            let id = format!("{}_{qi:02}", category.tag());
            save_query(out_dir, &id, &img)?;
            out.push((category, id, img));
        }
    }

    // The unseen pair is the engineered rule with zero frequency, falling
    // back to (square, triangle).
    let unseen_pair = spec
        .dataset
        .pair_rules
        .iter()
        .find(|r| r.frequency == 0.0)
        .map(|r| r.shapes)
        .unwrap_or((Shape::Square, Shape::Triangle));
    let all = enumerate_space(space)?;
    let margin = dataset_spec.position_margin;
    for qi in 0..k {
        let mut elements = Vec::new();
        for shape in [unseen_pair.0, unseen_pair.1] {
            let pool: Vec<_> = all.iter().filter(|e| e.shape == shape).collect();
            let spec_el = *pool[rng.gen_range(0..pool.len())];
            elements.push(PlacedElement {
                spec: spec_el,
                center: (
                    rng.gen_range(margin..=1.0 - margin),
                    rng.gen_range(margin..=1.0 - margin),
                ),
            });
        }
        let scene = Scene { elements, canvas_px: render_cfg.canvas_px };
        let img = render(&scene, &render_cfg)?;
        let id = format!("unseen_{qi:02}");
        save_query(out_dir, &id, &img)?;
        out.push((Category::Unseen, id, img));
    }
    Ok(out)
}

fn save_query(out_dir: &Path, id: &str, img: &image::RgbImage) -> Result<()> {
    let dir = out_dir.join("queries").join(id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("query.png");
    if !path.exists() {
        img.save(&path)?;
    }
    Ok(())
}

fn assemble(
    spec: &ExperimentSpec,
    tau: TauCalibration,
    records: Vec<QueryRecord>,
) -> Result<OriginalityExperimentReport> {
    let mut aggregates = Vec::new();
    for category in Category::ALL {
        let cat: Vec<&QueryRecord> = records.iter().filter(|r| r.category == category).collect();
        let mut histogram = [0usize; 6];
        for r in &cat {
            match r.originality {
                OriginalityScore::Tokens(m) => histogram[(m - 1).min(5)] += 1,
                OriginalityScore::FivePlus => histogram[5] += 1,
            }
        }
        let ranks: Vec<f64> = cat.iter().map(|r| r.originality.rank()).collect();
        let mode_tokens = histogram
            .iter()
            .enumerate()
            .max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i)))
            .filter(|&(_, c)| *c > 0)
            .map(|(i, _)| i + 1);
        aggregates.push(CategoryAggregate {
            category,
            queries: cat.len(),
            histogram,
            median_rank: median(&ranks),
            mode_tokens,
        });
    }

    let get = |c: Category| aggregates.iter().find(|a| a.category == c).unwrap();
    let ordering = get(Category::Common).median_rank <= get(Category::Rare).median_rank
        && get(Category::Rare).median_rank <= get(Category::Unseen).median_rank;
    let mode_common_is_one = get(Category::Common).mode_tokens == Some(1);
    let unseen: Vec<&QueryRecord> =
        records.iter().filter(|r| r.category == Category::Unseen).collect();
    let unseen_high = unseen.iter().filter(|r| r.originality.rank() >= 4.0).count();
    let unseen_high_token_fraction = if unseen.is_empty() {
        0.0
    } else {
        unseen_high as f64 / unseen.len() as f64
    };
    // Monotone resource law on the unseen category: reconstruction scores
    // at m=5 vs m=1 for queries where both were explored.
    let mut m1 = Vec::new();
    let mut m5 = Vec::new();
    for r in &unseen {
        let find = |m: usize| r.recon_means.iter().find(|(mm, _)| *mm == m).map(|&(_, v)| v);
        if let (Some(a), Some(b)) = (find(1), find(5)) {
            m1.push(a);
            m5.push(b);
        }
    }
    let p_unseen_m5_below_m1 =
        if m1.len() >= 5 { Some(sign_test_p_less(&m5, &m1)) } else { None };

    Ok(OriginalityExperimentReport {
        name: spec.name.clone(),
        env: EnvFingerprint::current(),
        spec: spec.clone(),
        tau,
        queries: records,
        aggregates,
        stats: OriginalityStats {
            category_ordering_holds: ordering,
            mode_common_is_one,
            unseen_high_token_fraction,
            p_unseen_m5_below_m1,
        },
    })
}

fn emit(report: &OriginalityExperimentReport, out_dir: &Path) -> Result<()> {
    let mut csv =
        String::from("category,queries,tokens_1,tokens_2,tokens_3,tokens_4,tokens_5,five_plus,median_rank\n");
    for a in &report.aggregates {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            a.category.tag(),
            a.queries,
            a.histogram[0],
            a.histogram[1],
            a.histogram[2],
            a.histogram[3],
            a.histogram[4],
            a.histogram[5],
            a.median_rank
        ));
    }
    write_text(&out_dir.join("aggregates.csv"), &csv)?;

    let categories: Vec<String> =
        ["1", "2", "3", "4", "5", "5+"].iter().map(|s| s.to_string()).collect();
    let series: Vec<(String, &'static str, Vec<f64>)> = report
        .aggregates
        .iter()
        .enumerate()
        .map(|(i, a)| {
            (
                a.category.tag().to_string(),
                SERIES_COLORS[i],
                a.histogram.iter().map(|&c| c as f64).collect(),
            )
        })
        .collect();
    let svg = grouped_histogram(
        "Minimum tokens required for reconstruction",
        "token count",
        "queries",
        &categories,
        &series,
    );
    write_text(&out_dir.join("histogram.svg"), &svg)?;
    write_json(&out_dir.join("report.json"), report)
}
