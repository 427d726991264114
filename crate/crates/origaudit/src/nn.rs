//! Minimal reverse-mode autodiff and neural-network building blocks.
//!
//! Everything runs in `f64` on the CPU and is bit-deterministic: graphs are
//! built eagerly, ops allocate standard-layout arrays, and backward walks
//! nodes in reverse creation order. The engine covers exactly what the
//! diffusion stack needs (dense, conv, attention, norms, embeddings) and
//! nothing more.

mod io;
mod layers;
mod optim;
mod var;

pub use io::{canonical_bytes, fingerprint_hex, load_params, save_params};
pub use layers::{
    he_normal, sinusoidal_embedding, uniform_init, Attention, Conv2d, Graph, GroupNorm,
    LayerNorm, Linear, Param,
};
pub use optim::{Adam, AdamConfig};
pub use var::Var;
