//! Keyed artifact caching: datasets, trained bundles, and detectors are
//! built once per configuration hash and reused across runs and resumes.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::detect::{train_detector, BackendKind, Detector, LearnedDetector, TrainDetectorConfig};
use crate::diffusion::{
    load_dataset, train_autoencoder, train_denoiser, ModelBundle, NoiseSchedule, StackConfig,
};
use crate::render::{materialize_dataset, RenderConfig};
use crate::scene::DatasetSpec;
use crate::{Error, Result};

use super::DetectorChoice;

/// Stable short key from any serializable config.
pub fn config_key<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..6])
}

/// Materializes (or resumes) a dataset under `root/datasets/<key>`.
pub fn ensure_dataset(
    root: &Path,
    spec: &DatasetSpec,
    render_cfg: &RenderConfig,
) -> Result<PathBuf> {
    let key = config_key(&(spec, render_cfg));
    let dir = root.join("datasets").join(key);
    materialize_dataset(spec, render_cfg, &dir)?;
    Ok(dir)
}

/// Trains (or reloads) a full bundle on a dataset directory. The cache key
/// covers the stack config, the dataset key, and the training seed.
pub fn ensure_model(
    root: &Path,
    dataset_dir: &Path,
    stack: &StackConfig,
    render_cfg: &RenderConfig,
    seed: u64,
    log: bool,
) -> Result<(PathBuf, ModelBundle)> {
    let dataset_tag = dataset_dir.file_name().and_then(|s| s.to_str()).unwrap_or("d");
    let key = format!("{}-{}", dataset_tag, config_key(&(stack, seed)));
    let dir = root.join("models").join(key);
    if dir.join("fingerprint.txt").exists() {
        let bundle = ModelBundle::load(&dir)?;
        if bundle.meta.unet_trained {
            return Ok((dir, bundle));
        }
    }
    if log {
        eprintln!("[origaudit] training model in {}", dir.display());
    }
    let mut bundle = ModelBundle::init(stack, render_cfg.clone(), NoiseSchedule::default(), seed)?;
    let data = load_dataset(dataset_dir)?;
    let curve_vae = train_autoencoder(
        &bundle.vae,
        &data,
        &stack.train_vae,
        Some(&dir.join("autoencoder/curve.csv")),
    )?;
    bundle.meta.vae_trained = true;
    let (curve_unet, latent_scale) = train_denoiser(
        &bundle.unet,
        &bundle.text,
        &bundle.vae,
        &bundle.schedule,
        &data,
        &stack.train_unet,
        Some(&dir.join("denoiser/curve.csv")),
    )?;
    bundle.meta.latent_scale = latent_scale;
    bundle.meta.unet_trained = true;
    bundle.save(&dir)?;
    if log {
        let (v0, v1) = curve_vae.holdout_span("vae").unwrap_or((f64::NAN, f64::NAN));
        let (u0, u1) = curve_unet.holdout_span("unet").unwrap_or((f64::NAN, f64::NAN));
        eprintln!(
            "[origaudit] model ready: vae holdout {v0:.5} -> {v1:.5}, unet holdout {u0:.5} -> {u1:.5}"
        );
    }
    Ok((dir, ModelBundle::load(&dir)?))
}

/// Builds (or reloads) the configured detector for a dataset.
pub fn ensure_detector(
    root: &Path,
    dataset_dir: &Path,
    render_cfg: &RenderConfig,
    choice: &DetectorChoice,
    seed: u64,
) -> Result<Detector> {
    match choice.backend {
        BackendKind::Oracle => {
            Ok(Detector::oracle(render_cfg.clone(), choice.confidence_threshold))
        }
        BackendKind::Learned => {
            let dataset_tag =
                dataset_dir.file_name().and_then(|s| s.to_str()).unwrap_or("d");
            let cfg = TrainDetectorConfig { seed, ..TrainDetectorConfig::default() };
            let key = format!("{}-{}", dataset_tag, config_key(&cfg));
            let dir = root.join("detectors").join(key);
            if dir.join("meta.json").exists() {
                let model = LearnedDetector::load(&dir)?;
                return Ok(Detector::learned(model, choice.confidence_threshold));
            }
            let (model, eval) = train_detector(dataset_dir, &cfg)?;
            if eval.precision < 0.99 || eval.recall < 0.99 {
                eprintln!(
                    "[origaudit] warning: detector precision {:.4} recall {:.4} below 0.99 on held-out renders",
                    eval.precision, eval.recall
                );
            }
            model.save(&dir)?;
            std::fs::write(
                dir.join("eval.json"),
                serde_json::to_string_pretty(&eval)?,
            )
            .map_err(|e| Error::io(&dir, e))?;
            Ok(Detector::learned(model, choice.confidence_threshold))
        }
    }
}
