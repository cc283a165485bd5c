use super::kernels::{self, AttnGeom, ConvGeom};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::cell::{Cell, Ref, RefCell};

const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const CONV_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    Lhs,
    Rhs,
}

enum Op<T> {
    Leaf,
    StopGrad,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNT { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize, bc: Bcast },
    Sub { a: usize, b: usize, bc: Bcast },
    Mul { a: usize, b: usize, bc: Bcast },
    Div { a: usize, b: usize, bc: Bcast },
    AddRow { x: usize, bias: usize },
    Exp { a: usize },
    Log { a: usize },
    Neg { a: usize },
    Scale { a: usize, c: T },
    Relu { a: usize },
    Gelu { a: usize },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    L2Normalize { a: usize, norms: Vec<T> },
    Sum { a: usize },
    Mean { a: usize },
    Pick { a: usize, idx: Vec<usize> },
    GatherRows { a: usize, idx: Vec<usize> },
    Reshape { a: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, n: usize, out_ch: usize, cols: Vec<T> },
    AvgPool { x: usize, planes: usize, hw: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    Attention { qkv: usize, geom: AttnGeom, lengths: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run differentiation tape.
///
/// Nodes are appended in creation order, so the node list is always a
/// topological order. A graph can run [`Graph::backward`] once; a second
/// call is rejected.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    g: &'g Graph<T>,
    id: usize,
}

/// Convolution hyper-parameters for [`Var::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` when no gradient
    /// reached it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but zero-filled when nothing flowed in.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast_of(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        Ok((Bcast::None, a.to_vec()))
    } else if numel(b) == 1 {
        Ok((Bcast::Rhs, a.to_vec()))
    } else if numel(a) == 1 {
        Ok((Bcast::Lhs, b.to_vec()))
    } else {
        Err(Error::dim(op, a, b))
    }
}

fn zip_bcast<T: Real>(a: &[T], b: &[T], bc: Bcast, f: impl Fn(T, T) -> T) -> Vec<T> {
    match bc {
        Bcast::None => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Rhs => a.iter().map(|&x| f(x, b[0])).collect(),
        Bcast::Lhs => b.iter().map(|&y| f(a[0], y)).collect(),
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::c(GELU_C);
    let inner = c * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::c(GELU_C);
    let inner = c * (x + T::c(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::c(3.0 * 0.044715) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_raw(value, op, rg)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar root. Visits each node once.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![T::one()]);

        for id in (0..=root.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), gy)?);
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    contrib: impl FnOnce() -> Vec<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let c = contrib();
    match &mut grads[id] {
        Some(g) => {
            for (x, y) in g.iter_mut().zip(c) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(c),
    }
}

/// Reduces a broadcast gradient back onto a scalar operand.
fn reduce_if<T: Real>(g: Vec<T>, to_scalar: bool) -> Vec<T> {
    if to_scalar {
        vec![g.iter().copied().sum()]
    } else {
        g
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], id: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| nodes[i].value.data();
    let y = nodes[id].value.data();
    match &nodes[id].op {
        Op::Leaf | Op::StopGrad => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            accumulate(nodes, grads, *a, || kernels::matmul_nt(gy, val(*b), m, n, k));
            accumulate(nodes, grads, *b, || kernels::matmul_tn(val(*a), gy, m, k, n));
        }
        Op::MatMulNT { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            accumulate(nodes, grads, *a, || kernels::matmul(gy, val(*b), m, n, k));
            accumulate(nodes, grads, *b, || kernels::matmul_tn(gy, val(*a), m, n, k));
        }
        Op::Transpose { a, rows, cols } => {
            accumulate(nodes, grads, *a, || kernels::transpose(gy, *cols, *rows));
        }
        Op::Add { a, b, bc } => {
            accumulate(nodes, grads, *a, || reduce_if(gy.to_vec(), *bc == Bcast::Lhs));
            accumulate(nodes, grads, *b, || reduce_if(gy.to_vec(), *bc == Bcast::Rhs));
        }
        Op::Sub { a, b, bc } => {
            accumulate(nodes, grads, *a, || reduce_if(gy.to_vec(), *bc == Bcast::Lhs));
            accumulate(nodes, grads, *b, || {
                reduce_if(gy.iter().map(|&g| -g).collect(), *bc == Bcast::Rhs)
            });
        }
        Op::Mul { a, b, bc } => {
            let (av, bv, bc) = (val(*a), val(*b), *bc);
            accumulate(nodes, grads, *a, || {
                let g = match bc {
                    Bcast::None | Bcast::Lhs => gy.iter().zip(bv).map(|(&g, &x)| g * x).collect(),
                    Bcast::Rhs => gy.iter().map(|&g| g * bv[0]).collect(),
                };
                reduce_if(g, bc == Bcast::Lhs)
            });
            accumulate(nodes, grads, *b, || {
                let g = match bc {
                    Bcast::None | Bcast::Rhs => gy.iter().zip(av).map(|(&g, &x)| g * x).collect(),
                    Bcast::Lhs => gy.iter().map(|&g| g * av[0]).collect(),
                };
                reduce_if(g, bc == Bcast::Rhs)
            });
        }
        Op::Div { a, b, bc } => {
            let (bv, bc) = (val(*b), *bc);
            accumulate(nodes, grads, *a, || {
                let g = match bc {
                    Bcast::None | Bcast::Lhs => gy.iter().zip(bv).map(|(&g, &x)| g / x).collect(),
                    Bcast::Rhs => gy.iter().map(|&g| g / bv[0]).collect(),
                };
                reduce_if(g, bc == Bcast::Lhs)
            });
            // d(a/b)/db = -y/b
            accumulate(nodes, grads, *b, || {
                let g = match bc {
                    Bcast::None | Bcast::Lhs => gy
                        .iter()
                        .zip(y)
                        .zip(bv)
                        .map(|((&g, &yv), &x)| -g * yv / x)
                        .collect(),
                    Bcast::Rhs => gy.iter().zip(y).map(|(&g, &yv)| -g * yv / bv[0]).collect(),
                };
                reduce_if(g, bc == Bcast::Rhs)
            });
        }
        Op::AddRow { x, bias } => {
            accumulate(nodes, grads, *x, || gy.to_vec());
            accumulate(nodes, grads, *bias, || {
                let d = val(*bias).len();
                let mut gb = vec![T::zero(); d];
                for row in gy.chunks(d) {
                    for (s, &g) in gb.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                gb
            });
        }
        Op::Exp { a } => {
            accumulate(nodes, grads, *a, || gy.iter().zip(y).map(|(&g, &e)| g * e).collect());
        }
        Op::Log { a } => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || gy.iter().zip(av).map(|(&g, &x)| g / x).collect());
        }
        Op::Neg { a } => {
            accumulate(nodes, grads, *a, || gy.iter().map(|&g| -g).collect());
        }
        Op::Scale { a, c } => {
            accumulate(nodes, grads, *a, || gy.iter().map(|&g| g * *c).collect());
        }
        Op::Relu { a } => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || {
                gy.iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect()
            });
        }
        Op::Gelu { a } => {
            let av = val(*a);
            accumulate(nodes, grads, *a, || {
                gy.iter().zip(av).map(|(&g, &x)| g * gelu_grad(x)).collect()
            });
        }
        Op::SoftmaxRows { a } => {
            let w = nodes[id].value.row_len();
            accumulate(nodes, grads, *a, || {
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(w).zip(y.chunks(w)).zip(gy.chunks(w)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for ((o, &p), &g) in o.iter_mut().zip(yr).zip(gr) {
                        *o = p * (g - dot);
                    }
                }
                out
            });
        }
        Op::LogSoftmaxRows { a } => {
            let w = nodes[id].value.row_len();
            accumulate(nodes, grads, *a, || {
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(w).zip(y.chunks(w)).zip(gy.chunks(w)) {
                    let s: T = gr.iter().copied().sum();
                    for ((o, &ly), &g) in o.iter_mut().zip(yr).zip(gr) {
                        *o = g - ly.exp() * s;
                    }
                }
                out
            });
        }
        Op::L2Normalize { a, norms } => {
            let w = nodes[id].value.row_len();
            accumulate(nodes, grads, *a, || {
                let mut out = vec![T::zero(); y.len()];
                for (((o, yr), gr), &nrm) in
                    out.chunks_mut(w).zip(y.chunks(w)).zip(gy.chunks(w)).zip(norms)
                {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for ((o, &p), &g) in o.iter_mut().zip(yr).zip(gr) {
                        *o = (g - p * dot) / nrm;
                    }
                }
                out
            });
        }
        Op::Sum { a } => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, || vec![gy[0]; n]);
        }
        Op::Mean { a } => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, || vec![gy[0] / T::c(n as f64); n]);
        }
        Op::Pick { a, idx } => {
            let w = nodes[*a].value.row_len();
            let n = val(*a).len();
            accumulate(nodes, grads, *a, || {
                let mut out = vec![T::zero(); n];
                for (r, (&j, &g)) in idx.iter().zip(gy).enumerate() {
                    out[r * w + j] += g;
                }
                out
            });
        }
        Op::GatherRows { a, idx } => {
            let w = nodes[*a].value.row_len();
            let n = val(*a).len();
            accumulate(nodes, grads, *a, || {
                let mut out = vec![T::zero(); n];
                for (&r, gr) in idx.iter().zip(gy.chunks(w)) {
                    for (o, &g) in out[r * w..(r + 1) * w].iter_mut().zip(gr) {
                        *o += g;
                    }
                }
                out
            });
        }
        Op::Reshape { a } => {
            accumulate(nodes, grads, *a, || gy.to_vec());
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            n,
            out_ch,
            cols,
        } => conv_backward(nodes, grads, gy, (*x, *w, *b), geom, *n, *out_ch, cols),
        Op::AvgPool { x, planes, hw } => {
            let inv = T::c(1.0 / *hw as f64);
            accumulate(nodes, grads, *x, || {
                let mut out = Vec::with_capacity(planes * hw);
                for &g in gy.iter() {
                    out.extend(std::iter::repeat(g * inv).take(*hw));
                }
                out
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = val(*gain).len();
            let gv = val(*gain);
            accumulate(nodes, grads, *x, || {
                let mut out = vec![T::zero(); gy.len()];
                let inv_d = T::c(1.0 / d as f64);
                for (((o, gr), xr), &rs) in out
                    .chunks_mut(d)
                    .zip(gy.chunks(d))
                    .zip(xhat.chunks(d))
                    .zip(rstd)
                {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xr[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        o[j] = rs * (gr[j] * gv[j] - m1 - xr[j] * m2);
                    }
                }
                out
            });
            accumulate(nodes, grads, *gain, || {
                let mut out = vec![T::zero(); d];
                for (gr, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        out[j] += gr[j] * xr[j];
                    }
                }
                out
            });
            accumulate(nodes, grads, *bias, || {
                let mut out = vec![T::zero(); d];
                for gr in gy.chunks(d) {
                    for j in 0..d {
                        out[j] += gr[j];
                    }
                }
                out
            });
        }
        Op::Attention {
            qkv,
            geom,
            lengths,
            probs,
        } => {
            accumulate(nodes, grads, *qkv, || {
                kernels::attention_backward(val(*qkv), probs, gy, geom, lengths)
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    gy: &[T],
    (x, w, b): (usize, usize, usize),
    geom: &ConvGeom,
    n: usize,
    out_ch: usize,
    cols: &[T],
) {
    let p = geom.out_h() * geom.out_w();
    let kk = geom.patch();
    let in_sz = geom.channels * geom.height * geom.width;
    let wv = nodes[w].value.data();

    if nodes[w].requires_grad || nodes[b].requires_grad {
        // Fixed-size sample chunks keep the reduction order independent of
        // the thread pool.
        let partials: Vec<(Vec<T>, Vec<T>)> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(CONV_CHUNK)
            .map(|chunk| {
                let mut dw = vec![T::zero(); out_ch * kk];
                let mut db = vec![T::zero(); out_ch];
                for &s in chunk {
                    let g = &gy[s * out_ch * p..(s + 1) * out_ch * p];
                    let c = &cols[s * kk * p..(s + 1) * kk * p];
                    let part = kernels::matmul_nt(g, c, out_ch, p, kk);
                    for (d, v) in dw.iter_mut().zip(part) {
                        *d += v;
                    }
                    for (o, row) in g.chunks(p).enumerate() {
                        db[o] += row.iter().copied().sum();
                    }
                }
                (dw, db)
            })
            .collect();
        accumulate(nodes, grads, w, || {
            let mut dw = vec![T::zero(); out_ch * kk];
            for (part, _) in &partials {
                for (d, &v) in dw.iter_mut().zip(part) {
                    *d += v;
                }
            }
            dw
        });
        accumulate(nodes, grads, b, || {
            let mut db = vec![T::zero(); out_ch];
            for (_, part) in &partials {
                for (d, &v) in db.iter_mut().zip(part) {
                    *d += v;
                }
            }
            db
        });
    }
    accumulate(nodes, grads, x, || {
        let mut dx = vec![T::zero(); n * in_sz];
        dx.par_chunks_mut(in_sz).enumerate().for_each(|(s, dxs)| {
            let g = &gy[s * out_ch * p..(s + 1) * out_ch * p];
            let dcols = kernels::matmul_tn(wv, g, out_ch, kk, p);
            kernels::col2im(&dcols, geom, dxs);
        });
        dx
    });
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.value(self.id).shape().to_vec()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<T> {
        self.g.value(self.id).clone()
    }

    pub fn item(&self) -> T {
        self.g.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let out = {
            let v = self.g.value(self.id);
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
                .expect("same shape")
        };
        self.g.push(out, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'g, T>,
        name: &'static str,
        make: impl Fn(usize, usize, Bcast) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'g, T>> {
        let (out, bc) = {
            let a = self.g.value(self.id);
            let b = self.g.value(other.id);
            let (bc, shape) = bcast_of(name, a.shape(), b.shape())?;
            (Tensor::new(shape, zip_bcast(a.data(), b.data(), bc, f))?, bc)
        };
        Ok(self
            .g
            .push(out, make(self.id, other.id, bc), &[self.id, other.id]))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (out, m, k, n) = {
            let a = self.g.value(self.id);
            let b = self.g.value(other.id);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let data = kernels::matmul(a.data(), b.data(), m, k, n);
            (Tensor::new(vec![m, n], data)?, m, k, n)
        };
        Ok(self.g.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        ))
    }

    /// `self · otherᵀ` for `[m×k]` and `[n×k]` operands.
    pub fn matmul_t(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (out, m, k, n) = {
            let a = self.g.value(self.id);
            let b = self.g.value(other.id);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(Error::dim("matmul_t", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let data = kernels::matmul_nt(a.data(), b.data(), m, k, n);
            (Tensor::new(vec![m, n], data)?, m, k, n)
        };
        Ok(self.g.push(
            out,
            Op::MatMulNT {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        ))
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let (out, rows, cols) = {
            let a = self.g.value(self.id);
            if a.shape().len() != 2 {
                return Err(Error::Shape(format!("transpose needs 2-D, got {:?}", a.shape())));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            (Tensor::new(vec![c, r], kernels::transpose(a.data(), r, c))?, r, c)
        };
        Ok(self.g.push(
            out,
            Op::Transpose {
                a: self.id,
                rows,
                cols,
            },
            &[self.id],
        ))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b, bc| Op::Add { a, b, bc }, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |a, b, bc| Op::Sub { a, b, bc }, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |a, b, bc| Op::Mul { a, b, bc }, |x, y| x * y)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        if self.g.value(other.id).data().iter().any(|&x| x == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary(other, "div", |a, b, bc| Op::Div { a, b, bc }, |x, y| x / y)
    }

    /// Adds a `[d]` bias to every `d`-wide row.
    pub fn add_row(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = {
            let x = self.g.value(self.id);
            let b = self.g.value(bias.id);
            let d = b.numel();
            if b.shape().len() != 1 || x.shape().last() != Some(&d) {
                return Err(Error::dim("add_row", x.shape(), b.shape()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                for (v, &bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.g.push(
            out,
            Op::AddRow {
                x: self.id,
                bias: bias.id,
            },
            &[self.id, bias.id],
        ))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(Op::Exp { a: self.id }, |x| x.exp())
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        if let Some(bad) = self
            .g
            .value(self.id)
            .data()
            .iter()
            .find(|&&x| x <= T::zero() || x.is_nan())
        {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive operand {bad}"),
            });
        }
        Ok(self.unary(Op::Log { a: self.id }, |x| x.ln()))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(Op::Neg { a: self.id }, |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::c(c);
        self.unary(Op::Scale { a: self.id, c }, move |x| x * c)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(Op::Relu { a: self.id }, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn gelu(self) -> Var<'g, T> {
        self.unary(Op::Gelu { a: self.id }, gelu)
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_gradient(self) -> Var<'g, T> {
        let v = self.value();
        self.g.push_raw(v, Op::StopGrad, false)
    }

    fn rowwise(self, log: bool) -> Result<Var<'g, T>> {
        let out = {
            let a = self.g.value(self.id);
            if a.data().iter().any(|x| x.is_nan()) {
                return Err(Error::Numeric("NaN input to softmax".into()));
            }
            let w = a.row_len();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(w.max(1)) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for x in row.iter_mut() {
                    *x = *x - max;
                    z += x.exp();
                }
                if log {
                    let lz = z.ln();
                    for x in row.iter_mut() {
                        *x = *x - lz;
                    }
                } else {
                    for x in row.iter_mut() {
                        *x = x.exp() / z;
                    }
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        let op = if log {
            Op::LogSoftmaxRows { a: self.id }
        } else {
            Op::SoftmaxRows { a: self.id }
        };
        Ok(self.g.push(out, op, &[self.id]))
    }

    /// Softmax over the last axis (rows of the `[rows, row_len]` view).
    pub fn softmax_rows(self) -> Result<Var<'g, T>> {
        self.rowwise(false)
    }

    pub fn log_softmax_rows(self) -> Result<Var<'g, T>> {
        self.rowwise(true)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(self) -> Result<Var<'g, T>> {
        let (out, norms) = {
            let a = self.g.value(self.id);
            let w = a.row_len();
            let mut data = a.data().to_vec();
            let mut norms = Vec::with_capacity(a.rows());
            for (r, row) in data.chunks_mut(w).enumerate() {
                let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
                if !(n.f64() >= NORM_EPS) {
                    return Err(Error::DegenerateEmbedding {
                        row: r,
                        norm: n.f64(),
                    });
                }
                for x in row.iter_mut() {
                    *x = *x / n;
                }
                norms.push(n);
            }
            (Tensor::new(a.shape().to_vec(), data)?, norms)
        };
        Ok(self.g.push(out, Op::L2Normalize { a: self.id, norms }, &[self.id]))
    }

    /// Pairwise dot products of unit rows: `[n×d] × [m×d] → [n×m]`.
    pub fn cosine_sim_matrix(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
            return Err(Error::dim("cosine_sim_matrix", &a, &b));
        }
        self.matmul_t(other)
    }

    pub fn sum(self) -> Var<'g, T> {
        let s: T = self.g.value(self.id).data().iter().copied().sum();
        self.g.push(Tensor::scalar(s), Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(self) -> Var<'g, T> {
        let m = {
            let v = self.g.value(self.id);
            v.data().iter().copied().sum::<T>() / T::c(v.numel() as f64)
        };
        self.g.push(Tensor::scalar(m), Op::Mean { a: self.id }, &[self.id])
    }

    /// `out[r] = self[r, idx[r]]` for a `[n×m]` input.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'g, T>> {
        let out = {
            let a = self.g.value(self.id);
            let w = a.row_len();
            if idx.len() != a.rows() || a.shape().len() != 2 {
                return Err(Error::dim("pick", a.shape(), &[idx.len()]));
            }
            if let Some(&bad) = idx.iter().find(|&&j| j >= w) {
                return Err(Error::Shape(format!("pick column {bad} out of {w}")));
            }
            let data = idx.iter().enumerate().map(|(r, &j)| a.data()[r * w + j]).collect();
            Tensor::new(vec![idx.len()], data)?
        };
        Ok(self.g.push(
            out,
            Op::Pick {
                a: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Selects rows of the `[rows, row_len]` view; repeats are allowed.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g, T>> {
        let out = {
            let a = self.g.value(self.id);
            if let Some(&bad) = idx.iter().find(|&&r| r >= a.rows()) {
                return Err(Error::Shape(format!(
                    "gather row {bad} out of {} rows",
                    a.rows()
                )));
            }
            a.select_rows(idx)
        };
        Ok(self.g.push(
            out,
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.g.push(out, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// 2-D convolution of `[N,C,H,W]` input with `[O,C,k,k]` weights.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Var<'g, T>, spec: Conv2dSpec) -> Result<Var<'g, T>> {
        let (out, geom, n, o, cols) = {
            let x = self.g.value(self.id);
            let w = self.g.value(weight.id);
            let b = self.g.value(bias.id);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
                return Err(Error::dim("conv2d", xs, ws));
            }
            if b.shape() != [ws[0]] {
                return Err(Error::dim("conv2d bias", b.shape(), &[ws[0]]));
            }
            let geom = ConvGeom {
                channels: xs[1],
                height: xs[2],
                width: xs[3],
                kernel: ws[2],
                stride: spec.stride,
                padding: spec.padding,
            };
            if xs[2] + 2 * spec.padding < ws[2] || xs[3] + 2 * spec.padding < ws[2] || spec.stride == 0 {
                return Err(Error::dim("conv2d geometry", xs, ws));
            }
            let (n, o) = (xs[0], ws[0]);
            let p = geom.out_h() * geom.out_w();
            let kk = geom.patch();
            let in_sz = geom.channels * geom.height * geom.width;
            let mut cols = vec![T::zero(); n * kk * p];
            let mut out = vec![T::zero(); n * o * p];
            let (xd, wd, bd) = (x.data(), w.data(), b.data());
            out.par_chunks_mut(o * p)
                .zip(cols.par_chunks_mut(kk * p))
                .enumerate()
                .for_each(|(s, (out_s, cols_s))| {
                    kernels::im2col(&xd[s * in_sz..(s + 1) * in_sz], &geom, cols_s);
                    let y = kernels::matmul(wd, cols_s, o, kk, p);
                    for ((dst, src), &bb) in out_s.chunks_mut(p).zip(y.chunks(p)).zip(bd) {
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v + bb;
                        }
                    }
                });
            let t = Tensor::new(vec![n, o, geom.out_h(), geom.out_w()], out)?;
            (t, geom, n, o, cols)
        };
        Ok(self.g.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                n,
                out_ch: o,
                cols,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Mean over the spatial axes: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(self) -> Result<Var<'g, T>> {
        let (out, planes, hw) = {
            let x = self.g.value(self.id);
            let s = x.shape();
            if s.len() != 4 {
                return Err(Error::Shape(format!("global_avg_pool needs 4-D, got {s:?}")));
            }
            let hw = s[2] * s[3];
            let inv = T::c(1.0 / hw as f64);
            let data: Vec<T> = x
                .data()
                .chunks(hw)
                .map(|c| c.iter().copied().sum::<T>() * inv)
                .collect();
            (Tensor::new(vec![s[0], s[1]], data)?, s[0] * s[1], hw)
        };
        Ok(self.g.push(out, Op::AvgPool { x: self.id, planes, hw }, &[self.id]))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let (out, xhat, rstd) = {
            let x = self.g.value(self.id);
            let g = self.g.value(gain.id);
            let b = self.g.value(bias.id);
            let d = g.numel();
            if x.shape().last() != Some(&d) || b.numel() != d {
                return Err(Error::dim("layer_norm", x.shape(), g.shape()));
            }
            let inv_d = T::c(1.0 / d as f64);
            let eps = T::c(LN_EPS);
            let mut xhat = x.data().to_vec();
            let mut rstd = Vec::with_capacity(x.numel() / d);
            let mut out = vec![T::zero(); x.numel()];
            for (row, o) in xhat.chunks_mut(d).zip(out.chunks_mut(d)) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                for j in 0..d {
                    row[j] = (row[j] - mean) * rs;
                    o[j] = row[j] * g.data()[j] + b.data()[j];
                }
                rstd.push(rs);
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        Ok(self.g.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Fused multi-head self-attention over a packed `[n·len × 3·width]`
    /// query/key/value matrix, masking keys past each sequence length.
    pub fn attention(self, n: usize, len: usize, heads: usize, lengths: &[usize]) -> Result<Var<'g, T>> {
        let (out, geom, probs) = {
            let qkv = self.g.value(self.id);
            let s = qkv.shape();
            if s.len() != 2 || s[0] != n * len || s[1] % 3 != 0 || (s[1] / 3) % heads != 0 {
                return Err(Error::Shape(format!(
                    "attention input {s:?} incompatible with n={n}, len={len}, heads={heads}"
                )));
            }
            if lengths.len() != n {
                return Err(Error::dim("attention lengths", &[lengths.len()], &[n]));
            }
            let geom = AttnGeom {
                n,
                len,
                width: s[1] / 3,
                heads,
            };
            let (out, probs) = kernels::attention_forward(qkv.data(), &geom, lengths);
            (Tensor::new(vec![n * len, geom.width], out)?, geom, probs)
        };
        Ok(self.g.push(
            out,
            Op::Attention {
                qkv: self.id,
                geom,
                lengths: lengths.to_vec(),
                probs,
            },
            &[self.id],
        ))
    }
}
