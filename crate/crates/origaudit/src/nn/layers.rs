//! Parameters, the per-step graph context, and the layer zoo.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::var::Var;

/// A named trainable tensor shared between a model, its optimizer, and the
/// checkpoint serializer.
#[derive(Clone)]
pub struct Param(Rc<RefCell<ParamInner>>);

struct ParamInner {
    name: String,
    value: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Param {
        Param(Rc::new(RefCell::new(ParamInner { name: name.into(), value })))
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn value(&self) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.0.borrow(), |p| &p.value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().value.shape().to_vec()
    }

    pub fn set(&self, value: ArrayD<f64>) {
        assert_eq!(self.shape(), value.shape(), "param {} shape change", self.name());
        self.0.borrow_mut().value = value;
    }

    pub fn update_inplace(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        f(&mut self.0.borrow_mut().value)
    }

    /// Identity key: two handles to the same storage share it.
    pub fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

/// Per-forward-pass context: caches one graph leaf per parameter so each
/// parameter accumulates a single gradient no matter how often it is used.
#[derive(Default)]
pub struct Graph {
    leaves: RefCell<HashMap<(usize, bool), Var>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    /// The trainable (or frozen) leaf for `p` in this graph.
    pub fn leaf(&self, p: &Param, frozen: bool) -> Var {
        let key = (p.key(), frozen);
        if let Some(v) = self.leaves.borrow().get(&key) {
            return v.clone();
        }
        let var = Var::leaf(p.value().clone(), !frozen);
        self.leaves.borrow_mut().insert(key, var.clone());
        var
    }

    pub fn param(&self, p: &Param) -> Var {
        self.leaf(p, false)
    }

    pub fn frozen(&self, p: &Param) -> Var {
        self.leaf(p, true)
    }

    /// Gradient accumulated on `p`'s trainable leaf, if it was used.
    pub fn grad_of(&self, p: &Param) -> Option<ArrayD<f64>> {
        self.leaves.borrow().get(&(p.key(), false)).and_then(|v| v.grad())
    }
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

pub fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Dense layer for `[N,D]` or `[B,L,D]` inputs.
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Linear {
        Linear {
            w: Param::new(format!("{name}.w"), he_normal(rng, &[d_in, d_out], d_in)),
            b: Param::new(format!("{name}.b"), zeros(&[d_out])),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn forward(&self, g: &Graph, x: &Var, frozen: bool) -> Var {
        let w = g.leaf(&self.w, frozen);
        let b = g.leaf(&self.b, frozen);
        let shape = x.shape().to_vec();
        let d_in = *shape.last().unwrap();
        let d_out = w.shape()[1];
        let flat = x.reshape(&[x.value().len() / d_in, d_in]);
        let y = flat.matmul(&w).add_bias_last(&b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        y.reshape(&out_shape)
    }
}

/// 3x3-style convolution with bias.
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Conv2d {
        let fan_in = c_in * k * k;
        Conv2d {
            w: Param::new(format!("{name}.w"), he_normal(rng, &[c_out, c_in, k, k], fan_in)),
            b: Param::new(format!("{name}.b"), zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn forward(&self, g: &Graph, x: &Var, frozen: bool) -> Var {
        x.conv2d(&g.leaf(&self.w, frozen), &g.leaf(&self.b, frozen), self.stride, self.pad)
    }
}

const NORM_EPS: f64 = 1e-5;

/// Group normalization over `[B,C,H,W]`, composed from primitive ops.
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: &str, channels: usize, groups: usize) -> GroupNorm {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        GroupNorm {
            gamma: Param::new(format!("{name}.gamma"), ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), zeros(&[channels])),
            groups,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn forward(&self, g: &Graph, x: &Var, frozen: bool) -> Var {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let grouped = x.reshape(&[b, self.groups, c / self.groups * h * w]);
        let mean = grouped.mean_last_keepdim();
        let centered = grouped.sub_bc_last(&mean);
        let var = centered.square().mean_last_keepdim();
        let std = var.add_scalar(NORM_EPS).sqrt();
        let normed = centered.div_bc_last(&std).reshape(&[b, c, h, w]);
        normed
            .mul_channel(&g.leaf(&self.gamma, frozen))
            .add_bias_channel(&g.leaf(&self.beta, frozen))
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), ones(&[dim])),
            beta: Param::new(format!("{name}.beta"), zeros(&[dim])),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn forward(&self, g: &Graph, x: &Var, frozen: bool) -> Var {
        let mean = x.mean_last_keepdim();
        let centered = x.sub_bc_last(&mean);
        let var = centered.square().mean_last_keepdim();
        let std = var.add_scalar(NORM_EPS).sqrt();
        let normed = centered.div_bc_last(&std);
        normed
            .mul_bias_last(&g.leaf(&self.gamma, frozen))
            .add_bias_last(&g.leaf(&self.beta, frozen))
    }
}

/// Single-head scaled dot-product attention. Queries come from `x`
/// (`[B,Lq,D]`), keys and values from `ctx` (`[B,Lk,Dc]`); self-attention
/// passes the same tensor for both.
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    dim: usize,
}

impl Attention {
    pub fn new(name: &str, d_model: usize, d_ctx: usize, rng: &mut impl Rng) -> Attention {
        Attention {
            wq: Linear::new(&format!("{name}.q"), d_model, d_model, rng),
            wk: Linear::new(&format!("{name}.k"), d_ctx, d_model, rng),
            wv: Linear::new(&format!("{name}.v"), d_ctx, d_model, rng),
            wo: Linear::new(&format!("{name}.o"), d_model, d_model, rng),
            dim: d_model,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        [&self.wq, &self.wk, &self.wv, &self.wo].iter().flat_map(|l| l.params()).collect()
    }

    /// `mask`, when given, is added to the attention scores and must
    /// broadcast to `[B,Lq,Lk]` (use 0 for visible, large negative for
    /// padded keys).
    pub fn forward(
        &self,
        g: &Graph,
        x: &Var,
        ctx: &Var,
        mask: Option<&ArrayD<f64>>,
        frozen: bool,
    ) -> Var {
        let q = self.wq.forward(g, x, frozen);
        let k = self.wk.forward(g, ctx, frozen);
        let v = self.wv.forward(g, ctx, frozen);
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut scores = q.bmm(&k.transpose_last2()).scale(scale);
        if let Some(m) = mask {
            scores = scores.add_const(m);
        }
        let attn = scores.softmax_last();
        let mixed = attn.bmm(&v);
        self.wo.forward(g, &mixed, frozen)
    }
}

/// Sinusoidal timestep embedding, `[B, dim]`; `dim` must be even.
pub fn sinusoidal_embedding(timesteps: &[f64], dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((timesteps.len(), dim));
    for (i, &t) in timesteps.iter().enumerate() {
        for j in 0..half {
            let freq = (-(j as f64) * (10_000f64).ln() / (half as f64 - 1.0).max(1.0)).exp();
            out[[i, j]] = (t * freq).sin();
            out[[i, half + j]] = (t * freq).cos();
        }
    }
    out
}

/// Mean over `[N]` of an `Array1` as a plain helper (not differentiated).
pub fn array1(v: Vec<f64>) -> Array1<f64> {
    Array1::from_vec(v)
}
