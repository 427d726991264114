//! The autodiff tape: [`Var`] wraps a value array together with the
//! backward closure that maps an output gradient to parent gradients.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Var]) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    id: usize,
    value: ArrayD<f64>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A node in the computation graph. Cloning is cheap (shared reference).
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    pub fn leaf(value: ArrayD<f64>, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn input(value: ArrayD<f64>) -> Var {
        Var::leaf(value, false)
    }

    pub fn scalar(v: f64) -> Var {
        Var::input(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn from_op(value: ArrayD<f64>, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            // Dead branch for autodiff: keep the value, drop the tape.
            return Var::leaf(value, false);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward: Some(backward),
        }))
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.0.grad.borrow().clone()
    }

    fn accumulate(&self, g: ArrayD<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Runs backpropagation from this scalar.
    pub fn backward(&self) {
        assert!(
            self.0.value.ndim() == 0 || self.0.value.len() == 1,
            "backward requires a scalar loss"
        );
        let mut nodes: Vec<Var> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        collect(self, &mut nodes, &mut seen);
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));
        self.accumulate(ArrayD::from_elem(self.0.value.raw_dim(), 1.0));
        for node in nodes {
            let Some(backward) = node.0.backward.as_ref() else { continue };
            let grad = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let parent_grads = backward(&grad, &node.0.parents);
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.requires_grad() {
                        parent.accumulate(pg);
                    }
                }
            }
        }
    }
}

fn collect(var: &Var, nodes: &mut Vec<Var>, seen: &mut HashSet<usize>) {
    if !var.requires_grad() || !seen.insert(var.0.id) {
        return;
    }
    // Iterative DFS; graphs can be thousands of nodes deep.
    let mut stack = vec![var.clone()];
    while let Some(v) = stack.pop() {
        for p in &v.0.parents {
            if p.requires_grad() && seen.insert(p.0.id) {
                stack.push(p.clone());
            }
        }
        nodes.push(v);
    }
}

fn std_owned(a: ndarray::ArrayViewD<'_, f64>) -> ArrayD<f64> {
    a.as_standard_layout().to_owned()
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let value = &self.0.value + &other.0.value;
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let value = &self.0.value - &other.0.value;
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(-g)]),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let value = &self.0.value * &other.0.value;
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                let a = parents[0].value();
                let b = parents[1].value();
                vec![Some(g * b), Some(g * a)]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = &self.0.value * c;
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g * c)]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = &self.0.value + c;
        Var::from_op(value, vec![self.clone()], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Var {
        let value = self.0.value.mapv(f64::sqrt);
        let y = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g * &(y.mapv(|v| 0.5 / v)))]),
        )
    }

    pub fn exp(&self) -> Var {
        let value = self.0.value.mapv(f64::exp);
        let y = value.clone();
        Var::from_op(value, vec![self.clone()], Box::new(move |g, _| vec![Some(g * &y)]))
    }

    pub fn ln(&self) -> Var {
        let value = self.0.value.mapv(f64::ln);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| vec![Some(g / parents[0].value())]),
        )
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.0.value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g * &y.mapv(|s| s * (1.0 - s)))]),
        )
    }

    pub fn silu(&self) -> Var {
        let value = self.0.value.mapv(|v| v / (1.0 + (-v).exp()));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].value();
                let dx = x.mapv(|v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    s + v * s * (1.0 - s)
                });
                vec![Some(g * &dx)]
            }),
        )
    }

    pub fn relu(&self) -> Var {
        let value = self.0.value.mapv(|v| v.max(0.0));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mask = parents[0].value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![Some(g * &mask)]
            }),
        )
    }

    pub fn tanh(&self) -> Var {
        let value = self.0.value.mapv(f64::tanh);
        let y = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g * &y.mapv(|v| 1.0 - v * v))]),
        )
    }
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

impl Var {
    pub fn mean_all(&self) -> Var {
        let n = self.0.value.len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), self.0.value.sum() / n);
        let shape: Vec<usize> = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gv = g.iter().next().copied().unwrap_or(0.0) / n;
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn sum_all(&self) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.0.value.sum());
        let shape: Vec<usize> = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    /// Mean over the last axis, keeping it with length 1.
    pub fn mean_last_keepdim(&self) -> Var {
        let d = *self.shape().last().expect("mean_last on scalar") as f64;
        let last = self.0.value.ndim() - 1;
        let mut value = self.0.value.mean_axis(Axis(last)).unwrap();
        value = value.insert_axis(Axis(last));
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone()],
            Box::new(move |g, parents| {
                let shape = parents[0].shape().to_vec();
                let gb = g.broadcast(IxDyn(&shape)).unwrap().mapv(|v| v / d);
                vec![Some(gb)]
            }),
        )
    }

    /// `self - other`, where `other` has the last axis of length 1.
    pub fn sub_bc_last(&self, other: &Var) -> Var {
        let value = &self.0.value - &other.0.value.broadcast(self.0.value.raw_dim()).unwrap();
        let last = self.0.value.ndim() - 1;
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let mut gb = g.sum_axis(Axis(last));
                gb = gb.insert_axis(Axis(last));
                vec![Some(g.clone()), Some(-&std_owned(gb.view()))]
            }),
        )
    }

    /// `self / other`, where `other` has the last axis of length 1.
    pub fn div_bc_last(&self, other: &Var) -> Var {
        let value = &self.0.value / &other.0.value.broadcast(self.0.value.raw_dim()).unwrap();
        let last = self.0.value.ndim() - 1;
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let a = parents[0].value();
                let b = parents[1].value();
                let bb = b.broadcast(a.raw_dim()).unwrap();
                let da = g / &bb;
                let db_full = -(g * a) / &(&bb * &bb);
                let db = db_full.sum_axis(Axis(last)).insert_axis(Axis(last));
                vec![Some(da), Some(std_owned(db.view()))]
            }),
        )
    }

    /// Adds a `[D]` bias over the last axis of `[..., D]`.
    pub fn add_bias_last(&self, bias: &Var) -> Var {
        let d = *self.shape().last().unwrap();
        assert_eq!(bias.shape(), [d], "bias shape mismatch");
        let value = &self.0.value + &bias.0.value.broadcast(self.0.value.raw_dim()).unwrap();
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let flat = g.view().into_shape_with_order((g.len() / d, d)).unwrap();
                let db = flat.sum_axis(Axis(0));
                vec![Some(g.clone()), Some(db.into_dyn())]
            }),
        )
    }

    /// Multiplies a `[D]` gain over the last axis of `[..., D]`.
    pub fn mul_bias_last(&self, gain: &Var) -> Var {
        let d = *self.shape().last().unwrap();
        assert_eq!(gain.shape(), [d], "gain shape mismatch");
        let value = &self.0.value * &gain.0.value.broadcast(self.0.value.raw_dim()).unwrap();
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone(), gain.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].value();
                let w = parents[1].value();
                let da = g * &w.broadcast(x.raw_dim()).unwrap();
                let prod = g * x;
                let flat = prod.view().into_shape_with_order((prod.len() / d, d)).unwrap();
                let dw = flat.sum_axis(Axis(0));
                vec![Some(da), Some(dw.into_dyn())]
            }),
        )
    }

    /// Adds a `[C]` bias over the channel axis of `[B,C,H,W]`.
    pub fn add_bias_channel(&self, bias: &Var) -> Var {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(bias.shape(), [s[1]]);
        let b4 = bias.0.value.view().into_shape_with_order((1, s[1], 1, 1)).unwrap();
        let value = &self.0.value + &b4.broadcast(IxDyn(&s)).unwrap();
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone(), bias.clone()],
            Box::new(|g, _| {
                let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                vec![Some(g.clone()), Some(std_owned(db.view()))]
            }),
        )
    }

    /// Multiplies a `[C]` gain over the channel axis of `[B,C,H,W]`.
    pub fn mul_channel(&self, gain: &Var) -> Var {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(gain.shape(), [s[1]]);
        let g4 = gain.0.value.view().into_shape_with_order((1, s[1], 1, 1)).unwrap();
        let value = &self.0.value * &g4.broadcast(IxDyn(&s)).unwrap();
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone(), gain.clone()],
            Box::new(|g, parents| {
                let x = parents[0].value();
                let w = parents[1].value();
                let c = x.shape()[1];
                let w4 = w.view().into_shape_with_order((1, c, 1, 1)).unwrap();
                let da = g * &w4.broadcast(x.raw_dim()).unwrap();
                let dw = (g * x).sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                vec![Some(da), Some(std_owned(dw.view()))]
            }),
        )
    }

    /// Adds a per-sample `[B,C]` map over `[B,C,H,W]` (timestep
    /// conditioning).
    pub fn add_chan_map(&self, map: &Var) -> Var {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(map.shape(), [s[0], s[1]]);
        let m4 = map.0.value.view().into_shape_with_order((s[0], s[1], 1, 1)).unwrap();
        let value = &self.0.value + &m4.broadcast(IxDyn(&s)).unwrap();
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone(), map.clone()],
            Box::new(|g, _| {
                let dm = g.sum_axis(Axis(3)).sum_axis(Axis(2));
                vec![Some(g.clone()), Some(std_owned(dm.view()))]
            }),
        )
    }

    /// Adds an `[L,D]` table over `[B,L,D]` (positional embeddings).
    pub fn add_row_broadcast(&self, rows: &Var) -> Var {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(rows.shape(), [s[1], s[2]]);
        let r3 = rows.0.value.view().into_shape_with_order((1, s[1], s[2])).unwrap();
        let value = &self.0.value + &r3.broadcast(IxDyn(&s)).unwrap();
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone(), rows.clone()],
            Box::new(|g, _| {
                let dr = g.sum_axis(Axis(0));
                vec![Some(g.clone()), Some(std_owned(dr.view()))]
            }),
        )
    }

    /// Repeats a `[1, ...]` tensor `k` times along the batch axis.
    pub fn repeat_batch(&self, k: usize) -> Var {
        let s = self.shape().to_vec();
        assert_eq!(s[0], 1, "repeat_batch needs batch 1");
        let mut out_shape = s.clone();
        out_shape[0] = k;
        let value = self.0.value.broadcast(IxDyn(&out_shape)).unwrap();
        Var::from_op(
            std_owned(value),
            vec![self.clone()],
            Box::new(|g, _| {
                let dg = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![Some(std_owned(dg.view()))]
            }),
        )
    }

    /// Adds a constant (non-differentiated) broadcastable mask.
    pub fn add_const(&self, mask: &ArrayD<f64>) -> Var {
        let value = &self.0.value + &mask.broadcast(self.0.value.raw_dim()).unwrap();
        Var::from_op(
            std_owned(value.view()),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.0.value.len(), "reshape size mismatch");
        let old_shape = self.shape().to_vec();
        let value = self
            .0
            .value
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape on standard layout")
            .to_owned();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let back = g.view().into_shape_with_order(IxDyn(&old_shape)).unwrap().to_owned();
                vec![Some(back)]
            }),
        )
    }

    /// Swaps the last two axes (copying).
    pub fn transpose_last2(&self) -> Var {
        let nd = self.0.value.ndim();
        assert!(nd >= 2);
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        let value = std_owned(self.0.value.view().permuted_axes(IxDyn(&perm)));
        let perm_back = perm.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(std_owned(g.view().permuted_axes(IxDyn(&perm_back))))]
            }),
        )
    }

    /// Narrows `axis` to `[start, start+len)`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let value = std_owned(
            self.0
                .value
                .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len)),
        );
        let full_shape = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dg = ArrayD::zeros(IxDyn(&full_shape));
                dg.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![Some(dg)]
            }),
        )
    }

    /// Concatenates along `axis`.
    pub fn concat(axis: usize, parts: &[&Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.0.value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            std_owned(value.view()),
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |g, _| {
                let mut out = Vec::new();
                let mut offset = 0;
                for len in &lens {
                    let part = std_owned(
                        g.slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len)),
                    );
                    out.push(Some(part));
                    offset += len;
                }
                out
            }),
        )
    }

    /// Log-sum-exp over the last axis, kept with length 1.
    pub fn logsumexp_last(&self) -> Var {
        let last = self.0.value.ndim() - 1;
        let d = *self.shape().last().unwrap();
        let rows = self.0.value.len() / d;
        let flat = self.0.value.view().into_shape_with_order((rows, d)).unwrap();
        let mut out = Vec::with_capacity(rows);
        for row in flat.rows() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            out.push(max + sum.ln());
        }
        let mut shape = self.shape().to_vec();
        shape[last] = 1;
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].value();
                let mut soft = x.clone();
                for mut row in soft.rows_mut() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                let gb = g.broadcast(x.raw_dim()).unwrap();
                vec![Some(&soft * &gb)]
            }),
        )
    }

    pub fn softmax_last(&self) -> Var {
        let last = self.0.value.ndim() - 1;
        let mut value = self.0.value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let y = value.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = g * &y;
                let dot = dx.sum_axis(Axis(last)).insert_axis(Axis(last));
                dx -= &(&y * &dot.broadcast(y.raw_dim()).unwrap());
                vec![Some(dx)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

fn gemm(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(1.0, a, b, 0.0, &mut c);
    c
}

impl Var {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        let a = self.0.value.view().into_dimensionality::<Ix2>().expect("matmul lhs 2d");
        let b = other.0.value.view().into_dimensionality::<Ix2>().expect("matmul rhs 2d");
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dim");
        let value = gemm(&a.to_owned(), &b.to_owned()).into_dyn();
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let a = parents[0]
                    .value()
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .to_owned();
                let b = parents[1]
                    .value()
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .to_owned();
                let da = if parents[0].requires_grad() {
                    Some(gemm(&g2, &b.t().to_owned()).into_dyn())
                } else {
                    None
                };
                let db = if parents[1].requires_grad() {
                    Some(gemm(&a.t().to_owned(), &g2).into_dyn())
                } else {
                    None
                };
                vec![da, db]
            }),
        )
    }

    /// Batched matmul: `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn bmm(&self, other: &Var) -> Var {
        let a = self.0.value.view().into_dimensionality::<Ix3>().expect("bmm lhs 3d");
        let b = other.0.value.view().into_dimensionality::<Ix3>().expect("bmm rhs 3d");
        let (nb, m, k) = a.dim();
        let (nb2, k2, n) = b.dim();
        assert_eq!(nb, nb2);
        assert_eq!(k, k2);
        let mut value = ndarray::Array3::<f64>::zeros((nb, m, n));
        for i in 0..nb {
            let av = a.index_axis(Axis(0), i).to_owned();
            let bv = b.index_axis(Axis(0), i).to_owned();
            value.index_axis_mut(Axis(0), i).assign(&gemm(&av, &bv));
        }
        Var::from_op(
            value.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a = parents[0].value().view().into_dimensionality::<Ix3>().unwrap();
                let b = parents[1].value().view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ndarray::Array3::<f64>::zeros(a.dim());
                let mut db = ndarray::Array3::<f64>::zeros(b.dim());
                for i in 0..nb {
                    let gi = g3.index_axis(Axis(0), i).to_owned();
                    let ai = a.index_axis(Axis(0), i).to_owned();
                    let bi = b.index_axis(Axis(0), i).to_owned();
                    if parents[0].requires_grad() {
                        da.index_axis_mut(Axis(0), i).assign(&gemm(&gi, &bi.t().to_owned()));
                    }
                    if parents[1].requires_grad() {
                        db.index_axis_mut(Axis(0), i).assign(&gemm(&ai.t().to_owned(), &gi));
                    }
                }
                vec![Some(da.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    /// Gathers rows of `table` (`[V,D]`) at `ids` (`[B,L]`) -> `[B,L,D]`.
    pub fn embedding(table: &Var, ids: &[Vec<usize>]) -> Var {
        let t = table.0.value.view().into_dimensionality::<Ix2>().expect("table 2d");
        let (v, d) = t.dim();
        let b = ids.len();
        let l = ids.first().map_or(0, |r| r.len());
        let mut value = ndarray::Array3::<f64>::zeros((b, l, d));
        for (bi, row) in ids.iter().enumerate() {
            assert_eq!(row.len(), l, "ragged id rows");
            for (li, &id) in row.iter().enumerate() {
                assert!(id < v, "token id {id} out of range {v}");
                value.slice_mut(ndarray::s![bi, li, ..]).assign(&t.row(id));
            }
        }
        let ids_owned: Vec<Vec<usize>> = ids.to_vec();
        Var::from_op(
            value.into_dyn(),
            vec![table.clone()],
            Box::new(move |g, parents| {
                let (v, d) = {
                    let s = parents[0].shape();
                    (s[0], s[1])
                };
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dt = Array2::<f64>::zeros((v, d));
                for (bi, row) in ids_owned.iter().enumerate() {
                    for (li, &id) in row.iter().enumerate() {
                        let mut dst = dt.row_mut(id);
                        dst += &g3.slice(ndarray::s![bi, li, ..]);
                    }
                }
                vec![Some(dt.into_dyn())]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Convolution ops
// ---------------------------------------------------------------------------

fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((b * oh * ow, c * kh * kw));
    {
        let xs = x.as_slice().expect("standard layout");
        let cols_s = cols.as_slice_mut().unwrap();
        let row_len = c * kh * kw;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let dst = row + (ci * kh + ky) * kw + kx;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    let src = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                                    cols_s[dst] = xs[src];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    {
        let dxs = dx.as_slice_mut().unwrap();
        let ds = dcols.as_slice().expect("standard layout");
        let row_len = c * kh * kw;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let dst = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                                dxs[dst] += ds[row + (ci * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Var {
    /// 2D convolution: input `[B,C,H,W]`, weight `[O,C,kh,kw]`, bias `[O]`.
    pub fn conv2d(&self, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Var {
        let x = self
            .0
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv input 4d")
            .to_owned();
        let (b, c, h, w) = x.dim();
        let ws = weight.shape().to_vec();
        assert_eq!(ws[1], c, "conv channel mismatch");
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (cols, oh, ow) = im2col(&x, kh, kw, stride, pad);
        let wmat = weight
            .0
            .value
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap()
            .t()
            .to_owned();
        let mut y = gemm(&cols, &wmat); // [B*OH*OW, O]
        {
            let bv = bias.0.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for mut row in y.rows_mut() {
                row += &bv;
            }
        }
        let value = y
            .into_shape_with_order((b, oh, ow, o))
            .unwrap()
            .permuted_axes([0, 3, 1, 2]);
        let cols = Rc::new(cols);
        let cols_for_back = Rc::clone(&cols);
        Var::from_op(
            std_owned(value.view().into_dyn()),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, parents| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (gb, go, goh, gow) = g4.dim();
                // [B,O,OH,OW] -> [B*OH*OW, O]
                let gmat = std_owned(g4.permuted_axes([0, 2, 3, 1]).into_dyn())
                    .into_shape_with_order((gb * goh * gow, go))
                    .unwrap();
                let dbias = if parents[2].requires_grad() {
                    Some(gmat.sum_axis(Axis(0)).into_dyn())
                } else {
                    None
                };
                let dweight = if parents[1].requires_grad() {
                    // [C*kh*kw, O] -> [O, C, kh, kw]
                    let dw = gemm(&cols_for_back.t().to_owned(), &gmat);
                    Some(
                        std_owned(dw.t().into_dyn())
                            .into_shape_with_order(IxDyn(&[go, c, kh, kw]))
                            .unwrap(),
                    )
                } else {
                    None
                };
                let dx = if parents[0].requires_grad() {
                    let wmat2 = parents[1]
                        .value()
                        .view()
                        .into_shape_with_order((go, c * kh * kw))
                        .unwrap()
                        .to_owned();
                    let dcols = gemm(&gmat, &wmat2);
                    Some(col2im(&dcols, b, c, h, w, kh, kw, stride, pad).into_dyn())
                } else {
                    None
                };
                vec![dx, dweight, dbias]
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&self) -> Var {
        let x = self.0.value.view().into_dimensionality::<Ix4>().expect("upsample 4d");
        let (b, c, h, w) = x.dim();
        let mut y = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = x[[bi, ci, i, j]];
                        y[[bi, ci, 2 * i, 2 * j]] = v;
                        y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        Var::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, ci, i, j]] = g4[[bi, ci, 2 * i, 2 * j]]
                                    + g4[[bi, ci, 2 * i + 1, 2 * j]]
                                    + g4[[bi, ci, 2 * i, 2 * j + 1]]
                                    + g4[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Mean squared error against a constant or variable target.
    pub fn mse(&self, target: &Var) -> Var {
        self.sub(target).square().mean_all()
    }
}
