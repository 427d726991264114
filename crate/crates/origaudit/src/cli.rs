//! The `origaudit` command-line interface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::detect::{BackendKind, Detector, LearnedDetector};
use crate::diffusion::{
    load_dataset, sample_batch, train_autoencoder, train_denoiser, ConditioningSource,
    ModelBundle, NoiseSchedule, SampleConfig, StackConfig,
};
use crate::experiments::{
    run_fixed_location_ablation, run_generalization, run_originality, ExperimentKind,
    ExperimentSpec,
};
use crate::inversion::{invert, InversionConfig};
use crate::originality::{
    calibrate_threshold, originality_score, OriginalityThresholds, SceneJaccardMetric,
};
use crate::render::{
    load_render_snapshot, materialize_dataset, RenderConfig, MANIFEST_FILE,
};
use crate::scene::DatasetSpec;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "origaudit",
    version,
    about = "Synthetic diffusion playground and image-originality audit"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Vae,
    Unet,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a dataset (images + manifest) from a declarative spec.
    GenData {
        /// Dataset spec TOML file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Canvas size in pixels (glyph geometry scales with it).
        #[arg(long, default_value_t = 64)]
        canvas: u32,
    },
    /// Train one stage of the stack on a materialized dataset.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Stack config TOML (architecture + hyperparameters).
        #[arg(long)]
        cfg: Option<PathBuf>,
        /// Model directory to create or update.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample images from a trained model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Denoising steps (defaults to the schedule's sampler steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance scale; 1.0 = off.
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect elements in a directory of images.
    Detect {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory carrying the render geometry snapshot
        /// (defaults to `--images` itself, then to the default geometry).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Trained detector directory (switches to the learned backend).
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
    },
    /// Learn token embeddings that reconstruct a query image.
    Invert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Token count (1..=5).
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training prompt template containing `S*`.
        #[arg(long)]
        template: Option<String>,
        /// Init words (comma separated); default: dominant detected shape.
        #[arg(long)]
        init: Option<String>,
    },
    /// Compute the originality score (minimum sufficient token count).
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reconstruction gate; defaults to calibrating against `--data`.
        #[arg(long)]
        tau: Option<f64>,
        /// Displacement gate (normalized units).
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        /// Dataset directory for tau calibration when `--tau` is absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        m_max: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Cache directory for per-m artifacts (default: alongside --out).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Calibrate the reconstruction threshold tau on a dataset.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a declarative experiment (generalization, originality, or the
    /// fixed-location ablation).
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Apply the spec's `[paper_scale]` overrides (full-scale run).
        #[arg(long)]
        paper_scale: bool,
        /// Resume from cached per-run artifacts (always on; flag kept for
        /// explicitness).
        #[arg(long)]
        resume: bool,
    },
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { spec, out, canvas } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let spec = DatasetSpec::from_toml(&text)?;
            let render_cfg = RenderConfig::for_canvas(canvas);
            let manifest = materialize_dataset(&spec, &render_cfg, &out)?;
            println!(
                "wrote {} images to {} ({} empty)",
                manifest.entries.len(),
                out.display(),
                manifest.empty_count()
            );
            Ok(())
        }
        Command::Train { stage, data, cfg, model, seed } => train_cmd(stage, &data, cfg, &model, seed),
        Command::Sample { model, prompt, n, seed, steps, guidance, out } => {
            let bundle = ModelBundle::load(&model)?;
            let cfg = SampleConfig {
                steps: steps.unwrap_or_else(|| bundle.schedule.default_sampler_steps()),
                seed,
                guidance_scale: guidance,
            };
            let images = sample_batch(&bundle, &ConditioningSource::Prompt(&prompt), n, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, img) in images.iter().enumerate() {
                img.save(out.join(format!("sample_{:04}.png", seed as usize + i)))?;
            }
            println!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Command::Detect { images, out, dataset, detector, threshold } => {
            detect_cmd(&images, &out, dataset.as_deref(), detector.as_deref(), threshold)
        }
        Command::Invert { model, image, m, out, steps, batch, lr, seed, template, init } => {
            let bundle = ModelBundle::load(&model)?;
            let query = image::open(&image)?.to_rgb8();
            let mut cfg = InversionConfig { m, ..InversionConfig::default() };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(b) = batch {
                cfg.batch = b;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = template {
                cfg.template = t;
            }
            if let Some(words) = init {
                cfg.init_words =
                    Some(words.split(',').map(|w| w.trim().to_string()).collect());
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let tokens = invert(&bundle, &query, &cfg, Some(&out.join("loss.csv")))?;
            tokens.save(&out)?;
            println!(
                "inverted {} with m={m}; final loss {:.5}",
                image.display(),
                tokens.final_loss().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Score { model, image, out, tau, eps, data, m_max, steps, batch, cache } => {
            score_cmd(&model, &image, &out, tau, eps, data.as_deref(), m_max, steps, batch, cache)
        }
        Command::Calibrate { model, data, out, pairs, seed } => {
            let bundle = ModelBundle::load(&model)?;
            let detector = Detector::oracle(bundle.meta.render_cfg.clone(), 0.9);
            let metric = SceneJaccardMetric::new(detector);
            let calib = calibrate_threshold(&bundle, &data, &metric, pairs, seed)?;
            std::fs::write(&out, serde_json::to_string_pretty(&calib)?)
                .map_err(|e| Error::io(&out, e))?;
            println!("tau = {:.4} -> {}", calib.tau, out.display());
            Ok(())
        }
        Command::Experiment { spec, out, paper_scale, resume: _ } => {
            let spec = ExperimentSpec::load(&spec, paper_scale)?;
            match spec.kind {
                ExperimentKind::Generalization => {
                    let report = run_generalization(&spec, &out)?;
                    println!(
                        "generalization: diversity trend {}, conditioning {}, copying regime {}",
                        report.stats.diversity_increases_generalization,
                        report.stats.conditioning_never_hurts,
                        report.stats.copying_regime_at_min_rung
                    );
                }
                ExperimentKind::Originality => {
                    let report = run_originality(&spec, &out)?;
                    println!(
                        "originality: ordering {}, mode(common)=1 {}, unseen>=4 fraction {:.2}",
                        report.stats.category_ordering_holds,
                        report.stats.mode_common_is_one,
                        report.stats.unseen_high_token_fraction
                    );
                }
                ExperimentKind::FixedLocationAblation => {
                    let report = run_fixed_location_ablation(&spec, &out)?;
                    println!(
                        "ablation: median fixed {:.4} vs standard {:.4} (eps {}): contrast {}",
                        report.median_fixed,
                        report.median_standard,
                        report.epsilon,
                        report.contrast_holds
                    );
                }
            }
            Ok(())
        }
    }
}

fn train_cmd(
    stage: Stage,
    data: &Path,
    cfg_path: Option<PathBuf>,
    model_dir: &Path,
    seed: u64,
) -> Result<()> {
    let stack = match &cfg_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            StackConfig::from_toml(&text)?
        }
        None => StackConfig::default(),
    };
    let dataset = load_dataset(data)?;
    match stage {
        Stage::Vae => {
            let mut bundle = if model_dir.join("meta.json").exists() {
                ModelBundle::load(model_dir)?
            } else {
                let render_cfg = load_render_snapshot(data)
                    .unwrap_or_else(|_| RenderConfig::for_canvas(dataset.canvas_px));
                ModelBundle::init(&stack, render_cfg, NoiseSchedule::default(), seed)?
            };
            let curve = train_autoencoder(
                &bundle.vae,
                &dataset,
                &stack.train_vae,
                Some(&model_dir.join("autoencoder/curve.csv")),
            )?;
            bundle.meta.vae_trained = true;
            bundle.save(model_dir)?;
            if let Some((first, last)) = curve.holdout_span("vae") {
                println!("vae holdout reconstruction: {first:.6} -> {last:.6}");
            }
        }
        Stage::Unet => {
            let mut bundle = ModelBundle::load(model_dir)?;
            if !bundle.meta.vae_trained {
                eprintln!("warning: training the denoiser on an untrained autoencoder");
            }
            let (curve, latent_scale) = train_denoiser(
                &bundle.unet,
                &bundle.text,
                &bundle.vae,
                &bundle.schedule,
                &dataset,
                &stack.train_unet,
                Some(&model_dir.join("denoiser/curve.csv")),
            )?;
            bundle.meta.latent_scale = latent_scale;
            bundle.meta.unet_trained = true;
            bundle.save(model_dir)?;
            if let Some((first, last)) = curve.holdout_span("unet") {
                println!("denoiser holdout loss: {first:.6} -> {last:.6}");
            }
        }
    }
    println!("model saved to {}", model_dir.display());
    Ok(())
}

fn detect_cmd(
    images: &Path,
    out: &Path,
    dataset: Option<&Path>,
    detector_dir: Option<&Path>,
    threshold: f64,
) -> Result<()> {
    let detector = match detector_dir {
        Some(d) => Detector::learned(LearnedDetector::load(d)?, threshold),
        None => {
            let cfg = dataset
                .map(load_render_snapshot)
                .unwrap_or_else(|| load_render_snapshot(images))
                .or_else(|_| -> Result<RenderConfig> {
                    // Fall back to the default geometry scaled by the first
                    // image's size.
                    let first = first_png(images)?;
                    let img = image::open(&first)?;
                    Ok(RenderConfig::for_canvas(img.width()))
                })?;
            Detector::oracle(cfg, threshold)
        }
    };
    let mut files: Vec<PathBuf> = Vec::new();
    let images_dir =
        if images.join(MANIFEST_FILE).exists() { images.join("images") } else { images.to_path_buf() };
    for entry in std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))? {
        let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
        if path.extension().and_then(|s| s.to_str()) == Some("png") {
            files.push(path);
        }
    }
    files.sort();
    let mut lines = Vec::with_capacity(files.len());
    for path in &files {
        let img = image::open(path)?.to_rgb8();
        let dets = detector.detect(&img)?;
        lines.push(serde_json::json!({
            "file": path.file_name().and_then(|s| s.to_str()).unwrap_or_default(),
            "detections": dets,
        }));
    }
    let mut text = String::new();
    for l in &lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
    println!("wrote {} records to {}", lines.len(), out.display());
    Ok(())
}

fn first_png(dir: &Path) -> Result<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|s| s.to_str()) == Some("png"))
        .collect();
    files.sort();
    files.into_iter().next().ok_or_else(|| Error::MissingArtifact {
        path: dir.to_path_buf(),
        message: "no png files".into(),
    })
}

#[allow(clippy::too_many_arguments)]
fn score_cmd(
    model: &Path,
    image_path: &Path,
    out: &Path,
    tau: Option<f64>,
    eps: f64,
    data: Option<&Path>,
    m_max: usize,
    steps: Option<usize>,
    batch: Option<usize>,
    cache: Option<PathBuf>,
) -> Result<()> {
    let bundle = ModelBundle::load(model)?;
    let query = image::open(image_path)?.to_rgb8();
    let detector = Detector::oracle(bundle.meta.render_cfg.clone(), 0.9);
    let metric = SceneJaccardMetric::new(Detector::oracle(bundle.meta.render_cfg.clone(), 0.9));
    let tau = match (tau, data) {
        (Some(t), _) => t,
        (None, Some(d)) => calibrate_threshold(&bundle, d, &metric, 1000, 0)?.tau,
        (None, None) => OriginalityThresholds::default().tau,
    };
    let thresholds = OriginalityThresholds { tau, epsilon: eps, ..Default::default() };
    let mut cfg = InversionConfig::default();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(b) = batch {
        cfg.batch = b;
    }
    let cache_dir = cache.unwrap_or_else(|| {
        out.parent().unwrap_or(Path::new(".")).join(format!(
            "{}_cache",
            out.file_stem().and_then(|s| s.to_str()).unwrap_or("score")
        ))
    });
    let query_id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("query")
        .to_string();
    let report = originality_score(
        &bundle,
        &query,
        &query_id,
        1..=m_max,
        &thresholds,
        &cfg,
        &metric,
        &detector,
        Some(&cache_dir),
    )?;
    report.save(out)?;
    println!(
        "originality({query_id}) = {} (tau {:.4}, eps {eps}) -> {}",
        serde_json::to_string(&report.originality)?,
        tau,
        out.display()
    );
    Ok(())
}
