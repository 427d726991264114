//! The generalization-vs-diversity sweep: train one model per (spanning
//! set, missing element) replicate, sample under the empty and descriptive
//! prompts, and measure the missing element's frequency among detected
//! elements.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::missing_element_counts;
use crate::diffusion::{sample_batch, ConditioningSource, SampleConfig};
use crate::plot::{line_chart, Series, SERIES_COLORS};
use crate::scene::{element_prompt, DatasetSpec, ElementSpec};
use crate::stats::{two_proportion_p_greater, wilson_upper};
use crate::{Error, Result};

use super::cache::{ensure_dataset, ensure_detector, ensure_model};
use super::report::{read_jsonl, write_json, write_jsonl, write_text, EnvFingerprint};
use super::{ExperimentKind, ExperimentSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Empty,
    Descriptive,
}

impl Condition {
    pub const BOTH: [Condition; 2] = [Condition::Empty, Condition::Descriptive];

    fn tag(&self) -> &'static str {
        match self {
            Condition::Empty => "empty",
            Condition::Descriptive => "descriptive",
        }
    }
}

/// One sampled-and-detected run: a (replicate, condition) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub rung: usize,
    pub replicate_index: usize,
    pub condition: Condition,
    pub prompt: String,
    pub target: ElementSpec,
    pub samples: usize,
    pub target_detections: usize,
    pub total_detections: usize,
    pub frequency: f64,
}

/// Per (rung, condition) aggregate over symmetry replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RungAggregate {
    pub rung: usize,
    pub condition: Condition,
    pub replicates: usize,
    pub target_detections: usize,
    pub total_detections: usize,
    /// Pooled counts ratio.
    pub pooled_frequency: f64,
    /// Arithmetic mean of per-replicate frequencies (the bias-mitigation
    /// averaging over symmetry replicates).
    pub mean_frequency: f64,
}

/// Trend statistics from pooled detection counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendStats {
    pub min_rung: usize,
    pub max_rung: usize,
    /// One-sided p-values for "max rung frequency > min rung frequency".
    pub p_max_gt_min_empty: f64,
    pub p_max_gt_min_descriptive: f64,
    /// Per rung: one-sided p-values for "empty > descriptive"; the ordering
    /// claim fails only when this is significant.
    pub p_uncond_exceeds_cond: Vec<(usize, f64)>,
    /// 95% Wilson upper bound on the min-rung empty-prompt frequency.
    pub min_rung_empty_upper95: f64,
    pub diversity_increases_generalization: bool,
    pub conditioning_never_hurts: bool,
    pub copying_regime_at_min_rung: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub name: String,
    pub env: EnvFingerprint,
    pub spec: ExperimentSpec,
    pub aggregates: Vec<RungAggregate>,
    pub stats: TrendStats,
}

const Z95: f64 = 1.6448536269514722;

pub fn run_generalization(spec: &ExperimentSpec, out_dir: &Path) -> Result<GeneralizationReport> {
    if spec.kind != ExperimentKind::Generalization {
        return Err(Error::InvalidConfig("spec kind is not generalization".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("resolved_spec.toml"), &toml::to_string_pretty(spec)?)?;
    let sampling = spec.sampling.as_ref().unwrap();
    let render_cfg = crate::render::RenderConfig::for_canvas(spec.dataset.canvas_px);

    let mut records: Vec<RunRecord> = Vec::new();
    for (ri, rep) in spec.replicates.iter().enumerate() {
        let dataset_spec = DatasetSpec {
            space: rep.space.clone(),
            num_images: spec.dataset.num_images,
            empty_fraction: spec.dataset.empty_fraction,
            max_elements: spec.dataset.max_elements,
            leave_out: vec![rep.leave_out],
            pair_rules: vec![],
            seed: spec.seed ^ (0x5eed + ri as u64 * 7919),
            position_margin: render_cfg.min_margin().max(0.25),
            fixed_pair_positions: None,
        };
        let dataset_dir = ensure_dataset(out_dir, &dataset_spec, &render_cfg)?;
        let (_, bundle) = ensure_model(
            out_dir,
            &dataset_dir,
            &spec.model,
            &render_cfg,
            spec.seed ^ (ri as u64 + 1),
            true,
        )?;
        let detector =
            ensure_detector(out_dir, &dataset_dir, &render_cfg, &spec.detector, spec.seed)?;
        for condition in Condition::BOTH {
            let run_dir = out_dir.join("runs").join(format!("rep{ri}_{}", condition.tag()));
            let record_path = run_dir.join("record.json");
            if record_path.exists() {
                let text = std::fs::read_to_string(&record_path)
                    .map_err(|e| Error::io(&record_path, e))?;
                records.push(serde_json::from_str(&text)?);
                continue;
            }
            std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
            let prompt = match condition {
                Condition::Empty => String::new(),
                Condition::Descriptive => element_prompt(&rep.leave_out, &rep.space)?,
            };
            eprintln!(
                "[origaudit] sampling rep {ri} rung {} condition {} (prompt {prompt:?})",
                rep.rung,
                condition.tag()
            );
            let sample_cfg = SampleConfig {
                steps: sampling.sample_steps,
                seed: spec.seed ^ (0xabc0 + (ri as u64 * 2 + condition as u64) * 104729),
                guidance_scale: sampling.guidance_scale,
            };
            let images = sample_batch(
                &bundle,
                &ConditioningSource::Prompt(&prompt),
                sampling.samples_per_condition,
                &sample_cfg,
            )?;
            for (i, img) in images.iter().take(16).enumerate() {
                img.save(run_dir.join(format!("sample_{i:02}.png")))?;
            }
            let (hits, total) = missing_element_counts(&detector, &images, &rep.leave_out)?;
            let record = RunRecord {
                rung: rep.rung,
                replicate_index: ri,
                condition,
                prompt,
                target: rep.leave_out,
                samples: images.len(),
                target_detections: hits,
                total_detections: total,
                frequency: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            };
            write_json(&record_path, &record)?;
            records.push(record);
        }
    }

    write_jsonl(&out_dir.join("raw.jsonl"), &records)?;
    let report = assemble_report(spec, &records)?;
    emit_generalization(&report, out_dir)?;
    Ok(report)
}

/// Rebuilds aggregates, stats, and files from the raw records on disk.
pub fn reemit_generalization(spec: &ExperimentSpec, out_dir: &Path) -> Result<GeneralizationReport> {
    let records: Vec<RunRecord> = read_jsonl(&out_dir.join("raw.jsonl"))?;
    let report = assemble_report(spec, &records)?;
    emit_generalization(&report, out_dir)?;
    Ok(report)
}

fn assemble_report(
    spec: &ExperimentSpec,
    records: &[RunRecord],
) -> Result<GeneralizationReport> {
    let mut rungs: Vec<usize> = records.iter().map(|r| r.rung).collect();
    rungs.sort_unstable();
    rungs.dedup();
    if rungs.is_empty() {
        return Err(Error::InvalidConfig("no run records".into()));
    }

    let mut aggregates = Vec::new();
    for &rung in &rungs {
        for condition in Condition::BOTH {
            let cell: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.rung == rung && r.condition == condition)
                .collect();
            let target: usize = cell.iter().map(|r| r.target_detections).sum();
            let total: usize = cell.iter().map(|r| r.total_detections).sum();
            let mean_frequency = if cell.is_empty() {
                0.0
            } else {
                cell.iter().map(|r| r.frequency).sum::<f64>() / cell.len() as f64
            };
            aggregates.push(RungAggregate {
                rung,
                condition,
                replicates: cell.len(),
                target_detections: target,
                total_detections: total,
                pooled_frequency: if total == 0 { 0.0 } else { target as f64 / total as f64 },
                mean_frequency,
            });
        }
    }

    let min_rung = *rungs.first().unwrap();
    let max_rung = *rungs.last().unwrap();
    let cell = |rung: usize, cond: Condition| -> (usize, usize) {
        aggregates
            .iter()
            .find(|a| a.rung == rung && a.condition == cond)
            .map(|a| (a.target_detections, a.total_detections))
            .unwrap_or((0, 0))
    };
    let (e_min_k, e_min_n) = cell(min_rung, Condition::Empty);
    let (e_max_k, e_max_n) = cell(max_rung, Condition::Empty);
    let (d_min_k, d_min_n) = cell(min_rung, Condition::Descriptive);
    let (d_max_k, d_max_n) = cell(max_rung, Condition::Descriptive);
    let p_max_gt_min_empty = two_proportion_p_greater(e_max_k, e_max_n, e_min_k, e_min_n);
    let p_max_gt_min_descriptive = two_proportion_p_greater(d_max_k, d_max_n, d_min_k, d_min_n);
    let mut p_uncond_exceeds_cond = Vec::new();
    for &rung in &rungs {
        let (ek, en) = cell(rung, Condition::Empty);
        let (dk, dn) = cell(rung, Condition::Descriptive);
        p_uncond_exceeds_cond.push((rung, two_proportion_p_greater(ek, en, dk, dn)));
    }
    let min_rung_empty_upper95 = wilson_upper(e_min_k, e_min_n, Z95);
    let stats = TrendStats {
        min_rung,
        max_rung,
        p_max_gt_min_empty,
        p_max_gt_min_descriptive,
        p_uncond_exceeds_cond: p_uncond_exceeds_cond.clone(),
        min_rung_empty_upper95,
        diversity_increases_generalization: p_max_gt_min_empty < 0.05
            && p_max_gt_min_descriptive < 0.05,
        conditioning_never_hurts: p_uncond_exceeds_cond.iter().all(|&(_, p)| p >= 0.05),
        copying_regime_at_min_rung: min_rung_empty_upper95 < 0.02,
    };

    Ok(GeneralizationReport {
        name: spec.name.clone(),
        env: EnvFingerprint::current(),
        spec: spec.clone(),
        aggregates,
        stats,
    })
}

fn emit_generalization(report: &GeneralizationReport, out_dir: &Path) -> Result<()> {
    // Aggregate table.
    let mut csv = String::from(
        "rung,condition,replicates,target_detections,total_detections,pooled_frequency,mean_frequency\n",
    );
    for a in &report.aggregates {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            a.rung,
            a.condition.tag(),
            a.replicates,
            a.target_detections,
            a.total_detections,
            a.pooled_frequency,
            a.mean_frequency
        ));
    }
    write_text(&out_dir.join("aggregates.csv"), &csv)?;

    // The diversity-vs-frequency curve, one line per condition.
    let series: Vec<Series> = Condition::BOTH
        .iter()
        .enumerate()
        .map(|(i, &cond)| Series {
            label: cond.tag().to_string(),
            points: report
                .aggregates
                .iter()
                .filter(|a| a.condition == cond)
                .map(|a| (a.rung as f64, a.mean_frequency))
                .collect(),
            color: SERIES_COLORS[i],
        })
        .collect();
    let svg = line_chart(
        "Missing-element frequency vs. training diversity",
        "element space size",
        "frequency",
        &series,
    );
    write_text(&out_dir.join("curve.svg"), &svg)?;
    write_json(&out_dir.join("report.json"), report)
}
