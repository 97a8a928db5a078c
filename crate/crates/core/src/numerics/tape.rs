//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! A [`Tape`] records every operation eagerly: each call computes its value
//! immediately and appends a node. Nodes only ever reference earlier nodes,
//! so creation order is a topological order and [`Tape::backward`] walks it
//! once in reverse.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::linalg::{self, ConvGeom};
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Four bilinear taps (flat input index, weight) per output cell.
pub type BilinearTaps = [(usize, f64); 4];

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Silu(Var),
    Sum(Var),
    /// `x` viewed as `[outer, len(b), inner]`, `b` broadcast over outer/inner.
    BroadcastAdd {
        x: Var,
        b: Var,
        inner: usize,
    },
    BroadcastMul {
        x: Var,
        g: Var,
        inner: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `a * b^T`
    MatMulNT {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    SoftmaxRows {
        x: Var,
        cols: usize,
    },
    LayerNormRows {
        x: Var,
        cols: usize,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        out_ch: usize,
        col: Vec<f64>,
    },
    Warp {
        x: Var,
        taps: Rc<[BilinearTaps]>,
        channels: usize,
    },
    /// Scalar-valued op whose input gradients were computed in the forward pass.
    Fused {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        expected: a.shape().to_vec(),
        actual: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant (stop-gradient).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value with gradient flow cut.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn binary(&self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(shape_err(x, y));
            }
            x.zip_map(y, f)?
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f);
        let ng = self.needs(&[a]);
        self.push(value, op, ng)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x / (1.0 + (-x).exp()), Op::Silu(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.sum();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of squared entries.
    pub fn sum_sq(&self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    fn broadcast(&self, x: Var, b: Var, inner: usize, mul: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
            let blen = bv.len();
            if inner == 0 || xv.len() % (blen * inner) != 0 {
                return Err(Error::invalid(format!(
                    "cannot broadcast {:?} over {:?} with inner {inner}",
                    bv.shape(),
                    xv.shape()
                )));
            }
            let mut out = xv.data().to_vec();
            for (i, o) in out.iter_mut().enumerate() {
                let bi = (i / inner) % blen;
                if mul {
                    *o *= bv.data()[bi];
                } else {
                    *o += bv.data()[bi];
                }
            }
            Tensor::from_parts(xv.shape().to_vec(), out)
        };
        let ng = self.needs(&[x, b]);
        let op = if mul {
            Op::BroadcastMul { x, g: b, inner }
        } else {
            Op::BroadcastAdd { x, b, inner }
        };
        Ok(self.push(value, op, ng))
    }

    /// Adds `b` along the axis of length `len(b)` followed by `inner` elements.
    /// Row bias on `[n, d]` uses `inner = 1`; channel bias on `[C, H, W]` uses
    /// `inner = H * W`.
    pub fn broadcast_add(&self, x: Var, b: Var, inner: usize) -> Result<Var> {
        self.broadcast(x, b, inner, false)
    }

    pub fn broadcast_mul(&self, x: Var, g: Var, inner: usize) -> Result<Var> {
        self.broadcast(x, g, inner, true)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = av.dims2()?;
            let (k2, n) = bv.dims2()?;
            if k != k2 {
                return Err(shape_err(av, bv));
            }
            let mut out = vec![0.0; m * n];
            linalg::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
            (Tensor::from_parts(vec![m, n], out), m, k, n)
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `a * b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = av.dims2()?;
            let (n, k2) = bv.dims2()?;
            if k != k2 {
                return Err(shape_err(av, bv));
            }
            let mut out = vec![0.0; m * n];
            linalg::matmul_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
            (Tensor::from_parts(vec![m, n], out), m, k, n)
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMulNT { a, b, m, k, n }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let (value, cols) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let cols = *xv.shape().last().unwrap_or(&0);
            if cols == 0 {
                return Err(Error::invalid("softmax over an empty axis"));
            }
            let mut out = xv.data().to_vec();
            for row in out.chunks_exact_mut(cols) {
                softmax_in_place(row);
            }
            (Tensor::from_parts(xv.shape().to_vec(), out), cols)
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::SoftmaxRows { x, cols }, ng))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm_rows(&self, x: Var, eps: f64) -> Result<Var> {
        let (value, cols, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let cols = *xv.shape().last().unwrap_or(&0);
            if cols == 0 {
                return Err(Error::invalid("layer norm over an empty axis"));
            }
            let mut out = xv.data().to_vec();
            let mut inv_std = Vec::with_capacity(out.len() / cols);
            for row in out.chunks_exact_mut(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                let r = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                inv_std.push(r);
            }
            (Tensor::from_parts(xv.shape().to_vec(), out), cols, inv_std)
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::LayerNormRows { x, cols, inv_std }, ng))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.data();
            if shape.iter().product::<usize>() != index.len() {
                return Err(Error::invalid(format!(
                    "gather of {} indices into shape {:?}",
                    index.len(),
                    shape
                )));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
                return Err(Error::invalid(format!(
                    "gather index {bad} out of {}",
                    xv.len()
                )));
            }
            Tensor::new(shape.to_vec(), index.iter().map(|&i| xv[i]).collect())?
        };
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Gather { x, index }, ng))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts
                .first()
                .ok_or_else(|| Error::invalid("concat of zero tensors"))?
                .0]
                .value;
            let tail = &first.shape()[1..];
            let mut lead = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.0].value;
                ensure_shape(tail, &v.shape()[1..])?;
                lead += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![lead];
            shape.extend_from_slice(tail);
            Tensor::from_parts(shape, data)
        };
        let ng = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// 2-D convolution of `x: [Ci, H, W]` with `w: [Co, Ci, k, k]`, zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (value, geom, out_ch, col) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let (ci, h, wd) = xv.chw()?;
            let (co, wci, kh, kw) = match *wv.shape() {
                [a, b, c, d] => (a, b, c, d),
                _ => return Err(shape_err(xv, wv)),
            };
            if wci != ci || kh != kw || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
                return Err(Error::invalid(format!(
                    "conv2d: input {:?}, weight {:?}, stride {stride}, pad {pad}",
                    xv.shape(),
                    wv.shape()
                )));
            }
            let geom = ConvGeom {
                in_ch: ci,
                height: h,
                width: wd,
                kernel: kh,
                stride,
                pad,
            };
            let col = linalg::im2col(xv.data(), &geom);
            let (ho, wo) = geom.out_hw();
            let mut out = vec![0.0; co * ho * wo];
            linalg::matmul_acc(wv.data(), &col, &mut out, co, geom.col_rows(), ho * wo);
            (Tensor::from_parts(vec![co, ho, wo], out), geom, co, col)
        };
        let ng = self.needs(&[x, w]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                geom,
                out_ch,
                col,
            },
            ng,
        ))
    }

    /// Applies per-cell bilinear taps to every channel of `x: [C, H, W]`.
    pub fn warp(&self, x: Var, taps: Rc<[BilinearTaps]>) -> Result<Var> {
        let (value, channels) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (c, h, w) = xv.chw()?;
            if taps.len() != h * w {
                return Err(Error::invalid(format!(
                    "warp taps cover {} cells, tensor has {}",
                    taps.len(),
                    h * w
                )));
            }
            let plane = h * w;
            let mut out = vec![0.0; xv.len()];
            for ch in 0..c {
                let src = &xv.data()[ch * plane..(ch + 1) * plane];
                for (o, t) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(taps.iter()) {
                    *o = t.iter().map(|&(i, wt)| wt * src[i]).sum();
                }
            }
            (Tensor::from_parts(xv.shape().to_vec(), out), c)
        };
        let ng = self.needs(&[x]);
        Ok(self.push(
            value,
            Op::Warp {
                x,
                taps,
                channels,
            },
            ng,
        ))
    }

    /// Records a scalar computed outside the tape together with its gradients
    /// with respect to `inputs`.
    pub fn fused_scalar(&self, inputs: &[Var], value: f64, grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::invalid("fused op needs one gradient per input"));
        }
        {
            let nodes = self.nodes.borrow();
            for (v, g) in inputs.iter().zip(&grads) {
                ensure_shape(nodes[v.0].value.shape(), g.shape())?;
            }
        }
        let ng = self.needs(inputs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                grads,
            },
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward from non-scalar of shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Square(a) => {
            let av = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += 2.0 * av[i] * g[i];
                }
            }
        }
        Op::Silu(a) => {
            let av = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    let s = 1.0 / (1.0 + (-av[i]).exp());
                    ga[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::BroadcastAdd { x, b, inner } => {
            let blen = nodes[b.0].value.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    gb[(i / inner) % blen] += gi;
                }
            }
        }
        Op::BroadcastMul { x, g: gain, inner } => {
            let (xv, gv) = (val(*x), val(*gain));
            let blen = gv.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, &gi) in g.iter().enumerate() {
                    gx[i] += gi * gv[(i / inner) % blen];
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (i, &gi) in g.iter().enumerate() {
                    gg[(i / inner) % blen] += gi * xv[i];
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                linalg::matmul_nt_acc(g, bv, ga, *m, *n, *k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                linalg::matmul_tn_acc(av, g, gb, *k, *m, *n);
            }
        }
        Op::MatMulNT { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                linalg::matmul_acc(g, bv, ga, *m, *n, *k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                linalg::matmul_tn_acc(g, av, gb, *n, *m, *k);
            }
        }
        Op::SoftmaxRows { x, cols } => {
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((gr, yr), dxr) in g
                    .chunks_exact(*cols)
                    .zip(y.chunks_exact(*cols))
                    .zip(gx.chunks_exact_mut(*cols))
                {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..*cols {
                        dxr[i] += yr[i] * (gr[i] - dotp);
                    }
                }
            }
        }
        Op::LayerNormRows { x, cols, inv_std } => {
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = *cols as f64;
                for (r, ((gr, yr), dxr)) in g
                    .chunks_exact(*cols)
                    .zip(y.chunks_exact(*cols))
                    .zip(gx.chunks_exact_mut(*cols))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for i in 0..*cols {
                        dxr[i] += inv_std[r] * (gr[i] - mean_g - yr[i] * mean_gy);
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&i, &gi) in index.iter().zip(g) {
                    gx[i] += gi;
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if let Some(gp) = slot(nodes, grads, *p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(a, b)| *a += b);
                }
                offset += len;
            }
        }
        Op::Conv2d {
            x,
            w,
            geom,
            out_ch,
            col,
        } => {
            let (ho, wo) = geom.out_hw();
            let cols = ho * wo;
            let rows = geom.col_rows();
            if let Some(gw) = slot(nodes, grads, *w) {
                linalg::matmul_nt_acc(g, col, gw, *out_ch, cols, rows);
            }
            if nodes[x.0].needs_grad {
                let wv = val(*w);
                let mut dcol = vec![0.0; rows * cols];
                linalg::matmul_tn_acc(wv, g, &mut dcol, rows, *out_ch, cols);
                if let Some(gx) = slot(nodes, grads, *x) {
                    linalg::col2im_acc(&dcol, geom, gx);
                }
            }
        }
        Op::Warp {
            x,
            taps,
            channels,
        } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let plane = taps.len();
                for ch in 0..*channels {
                    let dst = &mut gx[ch * plane..(ch + 1) * plane];
                    for (t, &gi) in taps.iter().zip(&g[ch * plane..(ch + 1) * plane]) {
                        for &(i, wt) in t {
                            dst[i] += wt * gi;
                        }
                    }
                }
            }
        }
        Op::Fused { inputs, grads: local } => {
            for (v, lg) in inputs.iter().zip(local) {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut()
                        .zip(lg.data())
                        .for_each(|(a, b)| *a += g[0] * b);
                }
            }
        }
    }
}

/// Convenience layers built from tape primitives.
impl Tape {
    /// `x: [n, d_in] * w: [d_in, d_out] + b: [d_out]`
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.broadcast_add(y, b, 1)
    }

    /// Convolution followed by a per-channel bias.
    pub fn conv2d_bias(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv2d(x, w, stride, pad)?;
        let shape = self.shape(y);
        let inner = shape[1] * shape[2];
        self.broadcast_add(y, b, inner)
    }

    /// Layer norm with learned gain and bias over the last axis.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.layer_norm_rows(x, 1e-5)?;
        let s = self.broadcast_mul(n, gain, 1)?;
        self.broadcast_add(s, bias, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        let l = t.sum_sq(x);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        let c = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = t.mul(x, c).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![3.0]));
        let y = t.add(x, x).unwrap();
        let z = t.mul(y, x).unwrap();
        let l = t.sum(z);
        // l = 2x^2, dl/dx = 4x
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let t = Tape::new();
        let a = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(t.add(a, b).is_err());
    }
}
