//! The fixed-location ablation: train one model on common-pair images
//! pinned to fixed positions and one on the standard distribution, invert
//! common queries with a single token, and compare matched-element
//! displacements across seeds. Near-zero displacement under the ablation
//! and above-threshold displacement under the standard model validate the
//! in-distribution test's meaning.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::position_displacement;
use crate::inversion::{invert, reconstruct, InversionConfig};
use crate::plot::{grouped_histogram, SERIES_COLORS};
use crate::render::load_manifest;
use crate::scene::{DatasetSpec, SamplingLabel};
use crate::stats::median;
use crate::{Error, Result};

use super::cache::{ensure_dataset, ensure_detector, ensure_model};
use super::originality_exp::appendix_space;
use super::report::{write_json, write_jsonl, write_text, EnvFingerprint};
use super::{ExperimentKind, ExperimentSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FixedLocation,
    Standard,
}

impl Variant {
    fn tag(&self) -> &'static str {
        match self {
            Variant::FixedLocation => "fixed_location",
            Variant::Standard => "standard",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationQueryRecord {
    pub variant: Variant,
    pub query_index: usize,
    /// Matched-element displacements per reconstruction seed.
    pub displacements: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: String,
    pub env: EnvFingerprint,
    pub spec: ExperimentSpec,
    pub epsilon: f64,
    pub median_fixed: f64,
    pub median_standard: f64,
    /// Fixed-location reconstructions stay put; standard ones move.
    pub contrast_holds: bool,
    pub records: Vec<AblationQueryRecord>,
}

pub fn run_fixed_location_ablation(
    spec: &ExperimentSpec,
    out_dir: &Path,
) -> Result<AblationReport> {
    if spec.kind != ExperimentKind::FixedLocationAblation {
        return Err(Error::InvalidConfig("spec kind is not fixed_location_ablation".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("resolved_spec.toml"), &toml::to_string_pretty(spec)?)?;
    let render_cfg = crate::render::RenderConfig::for_canvas(spec.dataset.canvas_px);
    let space = spec.dataset.space.clone().unwrap_or_else(appendix_space);

    let mut records: Vec<AblationQueryRecord> = Vec::new();
    for variant in [Variant::FixedLocation, Variant::Standard] {
        let dataset_spec = DatasetSpec {
            space: space.clone(),
            num_images: spec.dataset.num_images,
            empty_fraction: spec.dataset.empty_fraction,
            max_elements: spec.dataset.max_elements,
            leave_out: vec![],
            pair_rules: spec.dataset.pair_rules.clone(),
            seed: spec.seed ^ 0xab1a,
            position_margin: render_cfg.min_margin().max(0.25),
            fixed_pair_positions: match variant {
                Variant::FixedLocation => Some(spec.ablation.fixed_positions.clone()),
                Variant::Standard => None,
            },
        };
        let dataset_dir = ensure_dataset(out_dir, &dataset_spec, &render_cfg)?;
        let (_, bundle) =
            ensure_model(out_dir, &dataset_dir, &spec.model, &render_cfg, spec.seed, true)?;
        let detector =
            ensure_detector(out_dir, &dataset_dir, &render_cfg, &spec.detector, spec.seed)?;
        let manifest = load_manifest(&dataset_dir)?;
        let queries: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == SamplingLabel::Pair(0))
            .map(|(i, _)| i)
            .take(spec.ablation.queries)
            .collect();
        if queries.len() < spec.ablation.queries {
            return Err(Error::InvalidConfig(format!(
                "only {} common images for the ablation, need {}",
                queries.len(),
                spec.ablation.queries
            )));
        }
        for (qi, &mi) in queries.iter().enumerate() {
            let run_dir = out_dir.join("runs").join(format!("{}_{qi:02}", variant.tag()));
            let record_path = run_dir.join("record.json");
            if record_path.exists() {
                let text = std::fs::read_to_string(&record_path)
                    .map_err(|e| Error::io(&record_path, e))?;
                records.push(serde_json::from_str(&text)?);
                continue;
            }
            std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
            eprintln!("[origaudit] ablation {} query {qi}", variant.tag());
            let entry = &manifest.entries[mi];
            let query = image::open(dataset_dir.join(&entry.file))?.to_rgb8();
            query.save(run_dir.join("query.png"))?;
            let cfg = InversionConfig {
                m: 1,
                steps: spec.inversion.steps,
                batch: spec.inversion.batch,
                lr: spec.inversion.lr,
                inference_steps: spec.inversion.inference_steps,
                seed: spec.seed ^ (qi as u64 + 77),
                ..InversionConfig::default()
            };
            let tokens = invert(&bundle, &query, &cfg, Some(&run_dir.join("loss.csv")))?;
            let recons = reconstruct(&bundle, &tokens, spec.ablation.seeds_per_query)?;
            let query_dets = detector.detect(&query)?;
            let mut displacements = Vec::new();
            for (i, r) in recons.iter().enumerate() {
                r.save(run_dir.join(format!("recon_{i:02}.png")))?;
                let dets = detector.detect(r)?;
                displacements.push(position_displacement(&query_dets, &dets));
            }
            let record = AblationQueryRecord { variant, query_index: qi, displacements };
            write_json(&record_path, &record)?;
            records.push(record);
        }
    }

    write_jsonl(&out_dir.join("raw.jsonl"), &records)?;
    let report = assemble(spec, records);
    emit(&report, out_dir)?;
    Ok(report)
}

fn assemble(spec: &ExperimentSpec, records: Vec<AblationQueryRecord>) -> AblationReport {
    let pool = |variant: Variant| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.variant == variant)
            .flat_map(|r| r.displacements.iter().flatten().copied())
            .collect()
    };
    let fixed = pool(Variant::FixedLocation);
    let standard = pool(Variant::Standard);
    let median_fixed = median(&fixed);
    let median_standard = median(&standard);
    let eps = spec.ablation.epsilon;
    AblationReport {
        name: spec.name.clone(),
        env: EnvFingerprint::current(),
        spec: spec.clone(),
        epsilon: eps,
        median_fixed,
        median_standard,
        contrast_holds: median_fixed < eps && median_standard > eps,
        records,
    }
}

fn emit(report: &AblationReport, out_dir: &Path) -> Result<()> {
    let csv = format!(
        "variant,median_displacement,epsilon\nfixed_location,{},{}\nstandard,{},{}\n",
        report.median_fixed, report.epsilon, report.median_standard, report.epsilon
    );
    write_text(&out_dir.join("aggregates.csv"), &csv)?;
    let svg = grouped_histogram(
        "Matched-element displacement medians",
        "variant",
        "median displacement",
        &["fixed_location".to_string(), "standard".to_string()],
        &[(
            "median".to_string(),
            SERIES_COLORS[0],
            vec![report.median_fixed, report.median_standard],
        )],
    );
    write_text(&out_dir.join("medians.svg"), &svg)?;
    write_json(&out_dir.join("report.json"), report)
}
