//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates gradients into the leaves
//! (parameters and explicit leaves); intermediate gradients are transient.

use std::collections::HashMap;

use super::params::{GradBuffer, ParamId, ParamStore};
use super::tensor::{dims2, mm_acc, mm_t_acc, t_mm_acc};
use super::{Scalar, Tensor};
use crate::error::{invalid, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const LOG_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Vec<F>),
    BlendRows(Var, Var, Vec<bool>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Sum(Var),
    Pick(Var, usize),
    StraightThrough(Var),
    ScatterCols(Var, Vec<usize>),
    Kl {
        q: Var,
        p: Var,
        mask: Vec<bool>,
    },
    SmoothedCe {
        p: Var,
        targets: Vec<F>,
    },
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Operation recorder for one forward/backward computation.
#[derive(Debug)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
    leaf_grads: HashMap<usize, Vec<F>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// A tape whose parameters do not require gradients (evaluation only).
    pub fn inference() -> Self {
        Tape {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape.to_vec()))
    }

    /// Load a parameter; repeated loads return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let track = self.track_params;
        let v = self.push(store.get(id).clone(), Op::Param, track);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![F::zero(); n * m];
        mm_acc(self.data(a), self.data(b), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, m], out).unwrap(), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_t inner dims {k} vs {k2}");
        let mut out = vec![F::zero(); n * m];
        mm_t_acc(self.data(a), self.data(b), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, m], out).unwrap(), Op::MatMulT(a, b), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "elementwise op on {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).unwrap(), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast add of a row vector `b[d]` to every row of `a[n×d]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (n, d) = self.dims(a);
        assert_eq!(self.value(b).len(), d, "add_row width");
        let bd = self.data(b);
        let mut out = self.data(a).to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = out[i * d + j] + bd[j];
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out).unwrap(), Op::AddRow(a, b), rg)
    }

    /// Multiply row `i` of `a[n×d]` by `c[i]` where `c` is `[n×1]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (n, d) = self.dims(a);
        assert_eq!(self.value(c).len(), n, "mul_col height");
        let cd = self.data(c);
        let mut out = self.data(a).to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = out[i * d + j] * cd[i];
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(c);
        self.push(Tensor::new(shape, out).unwrap(), Op::MulCol(a, c), rg)
    }

    /// Multiply every element of `x` by the single element of `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar_var needs a scalar");
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        self.push(Tensor::new(shape, data).unwrap(), Op::MulScalarVar(x, s), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).unwrap(), op, rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    /// Natural log, floored at `1e-30` to keep the value finite.
    pub fn log(&mut self, a: Var) -> Var {
        let floor = F::lit(LOG_FLOOR);
        self.map(a, |x| x.max(floor).ln(), Op::Log(a))
    }

    // ---- structure ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(vec![n, total], out).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            assert_eq!(c, d, "concat_rows width mismatch");
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(vec![rows, d], out).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (n, d) = self.dims(a);
        assert!(start + width <= d, "slice_cols out of range");
        let src = self.data(a);
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            out.extend_from_slice(&src[i * d + start..i * d + start + width]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![n, width], out).unwrap(),
            Op::SliceCols(a, start),
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let (n, d) = self.dims(a);
        assert!(start + count <= n, "slice_rows out of range");
        let out = self.data(a)[start * d..(start + count) * d].to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![count, d], out).unwrap(),
            Op::SliceRows(a, start),
            rg,
        )
    }

    /// Rows `idx` of `a`, in order (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (n, d) = self.dims(a);
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather_rows index {i} >= {n}");
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![idx.len(), d], out).unwrap(),
            Op::GatherRows(a, idx.to_vec()),
            rg,
        )
    }

    /// Multiply row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<F>) -> Var {
        let (n, d) = self.dims(a);
        assert_eq!(factors.len(), n);
        let mut out = self.data(a).to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = out[i * d + j] * factors[i];
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::ScaleRows(a, factors), rg)
    }

    /// Row `i` taken from `a` where `mask[i]`, otherwise from `b`.
    pub fn blend_rows(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Var {
        let (n, d) = self.dims(a);
        assert_eq!(self.dims(b), (n, d));
        assert_eq!(mask.len(), n);
        let mut out = Vec::with_capacity(n * d);
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { self.data(a) } else { self.data(b) };
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out).unwrap(), Op::BlendRows(a, b, mask), rg)
    }

    /// Row-wise softmax. Entries with `mask == false` get an additive
    /// `-1e9` before normalization and are set to exactly zero afterwards.
    /// Every row must keep at least one unmasked entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (n, m) = self.dims(a);
        if let Some(mask) = mask {
            assert_eq!(mask.len(), n * m, "softmax mask size");
        }
        let src = self.data(a);
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * m + j]);
            let shifted: Vec<F> = (0..m)
                .map(|j| {
                    if keep(j) {
                        row[j]
                    } else {
                        row[j] + F::lit(super::MASK_NEG)
                    }
                })
                .collect();
            softmax_into(&shifted, &mut out[i * m..(i + 1) * m]);
            for j in 0..m {
                if !keep(j) {
                    out[i * m + j] = F::zero();
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, d) = self.dims(x);
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); n];
        let mut out = vec![F::zero(); n * d];
        let df = F::lit(d as f64);
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let r = F::one() / (var + F::lit(LN_EPS)).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    // ---- reductions and selections ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<F>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, F::one() / F::lit(n as f64))
    }

    /// Element `idx` (flat index) of `a` as a scalar.
    pub fn pick(&mut self, a: Var, idx: usize) -> Var {
        let v = self.data(a)[idx];
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Pick(a, idx), rg)
    }

    /// Exact one-hot at `idx` in the forward pass; the backward pass hands the
    /// incoming gradient to `soft` unchanged (straight-through estimator).
    pub fn straight_through(&mut self, soft: Var, idx: usize) -> Var {
        let n = self.value(soft).len();
        assert!(idx < n, "straight_through index out of range");
        let mut data = vec![F::zero(); n];
        data[idx] = F::one();
        let shape = self.shape(soft).to_vec();
        let rg = self.rg(soft);
        self.push(Tensor::new(shape, data).unwrap(), Op::StraightThrough(soft), rg)
    }

    /// Scatter-add columns of `p[n×S]` into `[n×vocab]` according to `ids`.
    pub fn scatter_cols(&mut self, p: Var, ids: &[usize], vocab: usize) -> Var {
        let (n, s) = self.dims(p);
        assert_eq!(ids.len(), s, "scatter_cols ids length");
        let src = self.data(p);
        let mut out = vec![F::zero(); n * vocab];
        for i in 0..n {
            for (j, &id) in ids.iter().enumerate() {
                assert!(id < vocab, "scatter id {id} >= vocab {vocab}");
                out[i * vocab + id] = out[i * vocab + id] + src[i * s + j];
            }
        }
        let rg = self.rg(p);
        self.push(
            Tensor::new(vec![n, vocab], out).unwrap(),
            Op::ScatterCols(p, ids.to_vec()),
            rg,
        )
    }

    /// `KL(q ‖ p)` over the unmasked support, as a scalar.
    pub fn kl_categorical(&mut self, q: Var, p: Var, mask: &[bool]) -> Var {
        let qd = self.data(q);
        let pd = self.data(p);
        assert_eq!(qd.len(), pd.len());
        assert_eq!(qd.len(), mask.len());
        let floor = F::lit(LOG_FLOOR);
        let mut s = F::zero();
        for i in 0..qd.len() {
            if mask[i] && qd[i] > F::zero() {
                s = s + qd[i] * (qd[i].ln() - pd[i].max(floor).ln());
            }
        }
        let rg = self.rg(q) || self.rg(p);
        self.push(
            Tensor::scalar(s),
            Op::Kl {
                q,
                p,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Per-row cross entropy of probabilities `p[n×C]` against constant
    /// target distributions `targets[n×C]`. Output shape `[n]`.
    pub fn cross_entropy_rows(&mut self, p: Var, targets: Vec<F>) -> Var {
        let (n, c) = self.dims(p);
        assert_eq!(targets.len(), n * c);
        let pd = self.data(p);
        let floor = F::lit(LOG_FLOOR);
        let mut out = vec![F::zero(); n];
        for i in 0..n {
            let mut s = F::zero();
            for j in 0..c {
                let t = targets[i * c + j];
                if t != F::zero() {
                    s = s - t * pd[i * c + j].max(floor).ln();
                }
            }
            out[i] = s;
        }
        let rg = self.rg(p);
        self.push(Tensor::vector(out), Op::SmoothedCe { p, targets }, rg)
    }

    // ---- backward ----

    /// Accumulate `∂loss/∂leaf` into every gradient-requiring leaf.
    /// Repeated calls add to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Param => {
                    let slot = self
                        .leaf_grads
                        .entry(i)
                        .or_insert_with(|| vec![F::zero(); g.len()]);
                    for (s, &v) in slot.iter_mut().zip(&g) {
                        *s = *s + v;
                    }
                }
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<F>, out: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let dims = |v: Var| dims2(nodes[v.0].value.shape());
        let y = nodes[out].value.data();
        // Apply `f` to the gradient slot of `v`, allocating it on demand.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let (n, k) = dims(*a);
                let m = dims(*b).1;
                acc(*a, &mut |s| mm_t_acc(g, val(*b), s, n, m, k));
                acc(*b, &mut |s| t_mm_acc(val(*a), g, s, n, k, m));
            }
            Op::MatMulT(a, b) => {
                let (n, k) = dims(*a);
                let m = dims(*b).0;
                acc(*a, &mut |s| mm_acc(g, val(*b), s, n, m, k));
                acc(*b, &mut |s| t_mm_acc(g, val(*a), s, n, m, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (x, &v) in s.iter_mut().zip(g) {
                        *x = *x - v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                let d = dims(*a).1;
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (i, &v) in g.iter().enumerate() {
                        s[i % d] = s[i % d] + v;
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (n, d) = dims(*a);
                let (av, cv) = (val(*a), val(*c));
                acc(*a, &mut |s| {
                    for i in 0..n {
                        for j in 0..d {
                            s[i * d + j] = s[i * d + j] + g[i * d + j] * cv[i];
                        }
                    }
                });
                acc(*c, &mut |s| {
                    for i in 0..n {
                        let mut t = F::zero();
                        for j in 0..d {
                            t = t + g[i * d + j] * av[i * d + j];
                        }
                        s[i] = s[i] + t;
                    }
                });
            }
            Op::MulScalarVar(x, sv) => {
                let (xv, sc) = (val(*x), val(*sv)[0]);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * sc;
                    }
                });
                acc(*sv, &mut |s| {
                    let t = g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<F>();
                    s[0] = s[0] + t;
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] = s[i] + g[i] * *c;
                }
            }),
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] = s[i] + g[i] * y[i] * (F::one() - y[i]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] = s[i] + g[i] * (F::one() - y[i] * y[i]);
                }
            }),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > F::zero() {
                            s[i] = s[i] + g[i];
                        }
                    }
                })
            }
            Op::Log(a) => {
                let av = val(*a);
                let floor = F::lit(LOG_FLOOR);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > floor {
                            s[i] = s[i] + g[i] / av[i];
                        }
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let n = dims(parts[0]).0;
                let total: usize = parts.iter().map(|&p| dims(p).1).sum();
                let mut off = 0;
                for &p in parts {
                    let w = dims(p).1;
                    acc(p, &mut |s| {
                        for i in 0..n {
                            for j in 0..w {
                                s[i * w + j] = s[i * w + j] + g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, d) = dims(*a);
                let w = g.len() / n.max(1);
                acc(*a, &mut |s| {
                    for i in 0..n {
                        for j in 0..w {
                            s[i * d + start + j] = s[i * d + start + j] + g[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let d = dims(*a).1;
                acc(*a, &mut |s| add_into(&mut s[start * d..start * d + g.len()], g));
            }
            Op::GatherRows(a, idx) => {
                let d = dims(*a).1;
                acc(*a, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ScaleRows(a, f) => {
                let d = dims(*a).1;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * f[i / d];
                    }
                });
            }
            Op::BlendRows(a, b, mask) => {
                let d = dims(*a).1;
                acc(*a, &mut |s| {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(&mut s[i * d..(i + 1) * d], &g[i * d..(i + 1) * d]);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut s[i * d..(i + 1) * d], &g[i * d..(i + 1) * d]);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = dims(*a);
                acc(*a, &mut |s| {
                    for i in 0..n {
                        let yr = &y[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<F>();
                        for j in 0..m {
                            s[i * m + j] = s[i * m + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = dims(*x);
                let gv = val(*gamma);
                acc(*gamma, &mut |s| {
                    for i in 0..n * d {
                        s[i % d] = s[i % d] + g[i] * xhat[i];
                    }
                });
                acc(*beta, &mut |s| {
                    for i in 0..n * d {
                        s[i % d] = s[i % d] + g[i];
                    }
                });
                acc(*x, &mut |s| {
                    let df = F::lit(d as f64);
                    for i in 0..n {
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..d {
                            let dh = g[i * d + j] * gv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[i * d + j];
                        }
                        for j in 0..d {
                            let dh = g[i * d + j] * gv[j];
                            let v = rstd[i] / df
                                * (df * dh - sum_dh - xhat[i * d + j] * sum_dh_h);
                            s[i * d + j] = s[i * d + j] + v;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| {
                for x in s.iter_mut() {
                    *x = *x + g[0];
                }
            }),
            Op::Pick(a, idx) => acc(*a, &mut |s| s[*idx] = s[*idx] + g[0]),
            Op::StraightThrough(soft) => acc(*soft, &mut |s| add_into(s, g)),
            Op::ScatterCols(p, ids) => {
                let (n, sw) = dims(*p);
                let vocab = g.len() / n.max(1);
                acc(*p, &mut |s| {
                    for i in 0..n {
                        for (j, &id) in ids.iter().enumerate() {
                            s[i * sw + j] = s[i * sw + j] + g[i * vocab + id];
                        }
                    }
                });
            }
            Op::Kl { q, p, mask } => {
                let (qv, pv) = (val(*q), val(*p));
                let floor = F::lit(LOG_FLOOR);
                acc(*q, &mut |s| {
                    for i in 0..s.len() {
                        if mask[i] && qv[i] > F::zero() {
                            let d = qv[i].ln() - pv[i].max(floor).ln() + F::one();
                            s[i] = s[i] + g[0] * d;
                        }
                    }
                });
                acc(*p, &mut |s| {
                    for i in 0..s.len() {
                        if mask[i] && qv[i] > F::zero() && pv[i] > floor {
                            s[i] = s[i] - g[0] * qv[i] / pv[i];
                        }
                    }
                });
            }
            Op::SmoothedCe { p, targets } => {
                let (n, c) = dims(*p);
                let pv = val(*p);
                let floor = F::lit(LOG_FLOOR);
                acc(*p, &mut |s| {
                    for i in 0..n {
                        for j in 0..c {
                            let k = i * c + j;
                            if targets[k] != F::zero() && pv[k] > floor {
                                s[k] = s[k] - g[i] * targets[k] / pv[k];
                            }
                        }
                    }
                });
            }
        }
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Add parameter gradients from this tape into `buf`.
    pub fn accumulate_param_grads<G: Scalar>(&self, buf: &mut GradBuffer<G>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                for (s, &x) in buf.get_mut(id).iter_mut().zip(g) {
                    *s = *s + G::lit(x.as_f64());
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Max-subtracted softmax of `x` written into `out`.
pub(crate) fn softmax_into<F: Scalar>(x: &[F], out: &mut [F]) {
    let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(W·x) => dL/dW = 1 ⊗ x
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let y = tape.matmul(w, x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let d = tape.detach(a);
        let p = tape.mul(a, d);
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0]);
        assert!(tape.grad(d).is_none());
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let s = tape.scale(a, 3.0);
        assert!(tape.backward(s).is_err());
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[6.0, 6.0]);
        tape.zero_grad();
        assert!(tape.grad(a).is_none());
    }

    #[test]
    fn straight_through_is_exact_one_hot() {
        let mut tape = Tape::<f32>::new();
        let soft = tape.leaf(Tensor::vector(vec![0.2, 0.7, 0.1]));
        let st = tape.straight_through(soft, 1);
        assert_eq!(tape.data(st), &[0.0, 1.0, 0.0]);
        let w = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let p = tape.mul(st, w);
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(soft).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn masked_softmax_rows_zeroes_masked() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 1.0, 7.0, 0.0, 0.0, 0.0]));
        let s = tape.softmax_rows(a, Some(&[true, true, false, true, true, true]));
        let d = tape.data(s);
        assert_eq!(d[2], 0.0);
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
