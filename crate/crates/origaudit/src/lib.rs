//! `origaudit` — a controlled synthetic text-to-image environment and an
//! originality audit for diffusion models.
//!
//! The crate has two halves that meet in the middle:
//!
//! * A **synthetic playground**: a grammar of geometric elements
//!   ([`scene`]), a deterministic rasterizer ([`render`]), and an element
//!   detector ([`detect`]) that together give a fully known data
//!   distribution with exact ground truth.
//! * A **miniature latent diffusion stack** ([`diffusion`]) trained from
//!   scratch on those datasets, plus **multi-token textual inversion**
//!   ([`inversion`]) and the **originality score** ([`originality`]): the
//!   minimum number of learned tokens needed to reconstruct a query image
//!   while staying in-distribution.
//!
//! [`experiments`] wires the pieces into declarative, resumable experiment
//! runs (generalization-vs-diversity sweeps, originality histograms, the
//! fixed-location ablation), and [`cli`] exposes everything as the
//! `origaudit` binary.

pub mod cli;
pub mod detect;
pub mod diffusion;
pub mod experiments;
pub mod inversion;
pub mod nn;
pub mod originality;
pub mod plot;
pub mod render;
pub mod scene;
pub mod stats;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid element space: {0}")]
    InvalidSpace(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("element {0} is not a member of the space")]
    NotInSpace(String),
    #[error("pair rules infeasible under the leave-out set: {0}")]
    InfeasiblePairRules(String),
    #[error("caption parse error at byte {position}: {message}")]
    CaptionParse { position: usize, message: String },
    #[error("invalid render config: {0}")]
    InvalidRenderConfig(String),
    #[error("image size {got_w}x{got_h} does not match the configured canvas {want}x{want}")]
    WrongImageSize { got_w: u32, got_h: u32, want: u32 },
    #[error("unknown word {word:?} for this tokenizer")]
    UnknownWord { word: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("missing artifact {path}: {message}")]
    MissingArtifact { path: PathBuf, message: String },
    #[error("dataset write interrupted at index {next_index} ({message}); rerun to resume")]
    PartialProgress { next_index: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml error: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("toml serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// A reproducible RNG for item `index` of a stream seeded with `seed`.
///
/// Every index owns an independent ChaCha stream, so items can be
/// (re)generated in any order with identical results.
pub fn indexed_rng(seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}
