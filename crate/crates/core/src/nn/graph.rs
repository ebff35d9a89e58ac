//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every node that requires
//! one. Values are computed eagerly, so a graph doubles as a plain evaluator
//! when no gradient is requested.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{col2im, gemm, haar_forward, haar_inverse, im2col, ConvGeom};
use super::tensor::Tensor;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddChannels { x: usize, v: usize },
    MulChannels { x: usize, v: usize },
    Relu(usize),
    LeakyRelu(usize, f64),
    Silu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    StraightThrough(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Upsample2x(usize),
    MeanSpatial(usize),
    Reshape(usize),
    Narrow { x: usize, dim: usize, start: usize },
    Cat { inputs: Vec<usize>, dim: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Sum(usize),
    L2NormalizeRows(usize),
    RowDot(usize, usize),
    CrossEntropy { logits: usize, labels: Vec<usize> },
    Dwt(usize),
    Idwt(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A leaf that gradients flow into.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates along `dim`; all other dimensions must agree.
    pub fn cat<'g>(&'g self, parts: &[Var<'g>], dim: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "cat of nothing");
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        let outer: usize = base[..dim].iter().product();
        let inner: usize = base[dim + 1..].iter().product();
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            assert_eq!(s.len(), base.len(), "cat rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&base).enumerate() {
                assert!(i == dim || a == b, "cat shape mismatch {s:?} vs {base:?}");
            }
            total += s[dim];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[dim] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[dim] = total;
        let needs = parts.iter().any(|p| p.requires_grad());
        self.push(Tensor::new(shape, data), Op::Cat { inputs: parts.iter().map(|p| p.id).collect(), dim }, needs)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape().to_vec(), vec![1.0]));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let needs = |i: usize| nodes[i].needs_grad;
            let val = |i: usize| nodes[i].value.as_ref();
            let mut acc = |i: usize, g: Tensor| match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(*a, gy.clone());
                    }
                    if needs(*b) {
                        acc(*b, gy);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        acc(*a, gy.clone());
                    }
                    if needs(*b) {
                        acc(*b, gy.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, gy.zip_map(val(*b), |g, y| g * y));
                    }
                    if needs(*b) {
                        acc(*b, gy.zip_map(val(*a), |g, x| g * x));
                    }
                }
                Op::Scale(a, s) => acc(*a, gy.scale(*s)),
                Op::AddScalar(a) => acc(*a, gy),
                Op::AddChannels { x, v } => {
                    if needs(*v) {
                        let (n, c, inner) = nc_inner(val(*x).shape());
                        let mut gv = vec![0.0; n * c];
                        for (i, chunk) in gy.data().chunks(inner).enumerate() {
                            gv[i] = chunk.iter().sum();
                        }
                        acc(*v, Tensor::new(val(*v).shape().to_vec(), gv));
                    }
                    if needs(*x) {
                        acc(*x, gy);
                    }
                }
                Op::MulChannels { x, v } => {
                    let xv = val(*x);
                    let vv = val(*v);
                    let (_, _, inner) = nc_inner(xv.shape());
                    if needs(*v) {
                        let gv: Vec<f64> = gy
                            .data()
                            .chunks(inner)
                            .zip(xv.data().chunks(inner))
                            .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                            .collect();
                        acc(*v, Tensor::new(vv.shape().to_vec(), gv));
                    }
                    if needs(*x) {
                        let mut gx = gy;
                        for (chunk, &s) in gx.data_mut().chunks_mut(inner).zip(vv.data()) {
                            chunk.iter_mut().for_each(|g| *g *= s);
                        }
                        acc(*x, gx);
                    }
                }
                Op::Relu(a) => acc(*a, gy.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::LeakyRelu(a, s) => {
                    let s = *s;
                    acc(*a, gy.zip_map(val(*a), |g, x| if x > 0.0 { g } else { g * s }))
                }
                Op::Silu(a) => acc(
                    *a,
                    gy.zip_map(val(*a), |g, x| {
                        let sg = sigmoid(x);
                        g * sg * (1.0 + x * (1.0 - sg))
                    }),
                ),
                Op::Sigmoid(_) | Op::Tanh(_) | Op::Exp(_) => {
                    let y = node.value.as_ref();
                    let (a, f): (usize, fn(f64) -> f64) = match &node.op {
                        Op::Sigmoid(a) => (*a, |y| y * (1.0 - y)),
                        Op::Tanh(a) => (*a, |y| 1.0 - y * y),
                        Op::Exp(a) => (*a, |y| y),
                        _ => unreachable!(),
                    };
                    acc(a, gy.zip_map(y, |g, y| g * f(y)));
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(*a, gy.zip_map(val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 }))
                }
                Op::StraightThrough(a) => acc(*a, gy),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = conv2d_backward(
                        val(*x),
                        val(*w),
                        &gy,
                        *stride,
                        *pad,
                        needs(*x),
                        needs(*w),
                        b.is_some_and(needs),
                    );
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*w, gw);
                    }
                    if let (Some(b), Some(gb)) = (b, gb) {
                        acc(*b, gb);
                    }
                }
                Op::Upsample2x(a) => {
                    let s = val(*a).shape();
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let mut g = vec![0.0; nc * h * w];
                    let gd = gy.data();
                    for p in 0..nc {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                g[p * h * w + (y / 2) * w + x / 2] += gd[p * 4 * h * w + y * 2 * w + x];
                            }
                        }
                    }
                    acc(*a, Tensor::new(s.to_vec(), g));
                }
                Op::MeanSpatial(a) => {
                    let s = val(*a).shape();
                    let inner: usize = s[2..].iter().product();
                    let inv = 1.0 / inner as f64;
                    let data = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, inner)).collect();
                    acc(*a, Tensor::new(s.to_vec(), data));
                }
                Op::Reshape(a) => acc(*a, gy.reshape(val(*a).shape().to_vec())),
                Op::Narrow { x, dim, start } => {
                    let s = val(*x).shape();
                    let outer: usize = s[..*dim].iter().product();
                    let inner: usize = s[dim + 1..].iter().product();
                    let len = gy.shape()[*dim];
                    let mut g = vec![0.0; val(*x).len()];
                    for o in 0..outer {
                        let src = &gy.data()[o * len * inner..(o + 1) * len * inner];
                        let off = o * s[*dim] * inner + start * inner;
                        g[off..off + len * inner].copy_from_slice(src);
                    }
                    acc(*x, Tensor::new(s.to_vec(), g));
                }
                Op::Cat { inputs, dim } => {
                    let out_shape = gy.shape();
                    let outer: usize = out_shape[..*dim].iter().product();
                    let inner: usize = out_shape[dim + 1..].iter().product();
                    let mut offset = 0;
                    for &i in inputs {
                        let s = val(i).shape().to_vec();
                        let len = s[*dim];
                        if needs(i) {
                            let mut g = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = o * out_shape[*dim] * inner + offset * inner;
                                g.extend_from_slice(&gy.data()[base..base + len * inner]);
                            }
                            acc(i, Tensor::new(s, g));
                        }
                        offset += len;
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (n, din) = (xv.dim(0), xv.dim(1));
                    let dout = wv.dim(0);
                    if needs(*x) {
                        let mut gx = vec![0.0; n * din];
                        gemm(
                            n,
                            dout,
                            din,
                            1.0,
                            gy.data(),
                            dout as isize,
                            1,
                            wv.data(),
                            din as isize,
                            1,
                            0.0,
                            &mut gx,
                            din as isize,
                            1,
                        );
                        acc(*x, Tensor::new(vec![n, din], gx));
                    }
                    if needs(*w) {
                        let mut gw = vec![0.0; dout * din];
                        gemm(
                            dout,
                            n,
                            din,
                            1.0,
                            gy.data(),
                            1,
                            dout as isize,
                            xv.data(),
                            din as isize,
                            1,
                            0.0,
                            &mut gw,
                            din as isize,
                            1,
                        );
                        acc(*w, Tensor::new(vec![dout, din], gw));
                    }
                    if let Some(b) = b.filter(|b| needs(*b)) {
                        let mut gb = vec![0.0; dout];
                        for row in gy.data().chunks(dout) {
                            for (a, g) in gb.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                        acc(b, Tensor::new(vec![dout], gb));
                    }
                }
                Op::Sum(a) => {
                    let g = gy.data()[0];
                    acc(*a, Tensor::full(val(*a).shape().to_vec(), g));
                }
                Op::L2NormalizeRows(a) => {
                    let xv = val(*a);
                    let y = node.value.as_ref();
                    let d = xv.dim(1);
                    let mut g = vec![0.0; xv.len()];
                    for r in 0..xv.dim(0) {
                        let xs = &xv.data()[r * d..(r + 1) * d];
                        let ys = &y.data()[r * d..(r + 1) * d];
                        let gs = &gy.data()[r * d..(r + 1) * d];
                        let norm = row_norm(xs);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            g[r * d + j] = (gs[j] - ys[j] * dot) / norm;
                        }
                    }
                    acc(*a, Tensor::new(xv.shape().to_vec(), g));
                }
                Op::RowDot(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let d = av.dim(1);
                    let scale_rows = |t: &Tensor| {
                        let mut out = t.clone();
                        for (row, &g) in out.data_mut().chunks_mut(d).zip(gy.data()) {
                            row.iter_mut().for_each(|v| *v *= g);
                        }
                        out
                    };
                    if needs(*a) {
                        acc(*a, scale_rows(bv));
                    }
                    if needs(*b) {
                        acc(*b, scale_rows(av));
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    let lv = val(*logits);
                    let k = lv.dim(1);
                    let n = lv.dim(0);
                    let g0 = gy.data()[0] / n as f64;
                    let mut g = vec![0.0; n * k];
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &lv.data()[r * k..(r + 1) * k];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - m).exp() / z;
                            g[r * k + j] = g0 * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    acc(*logits, Tensor::new(vec![n, k], g));
                }
                Op::Dwt(a) => {
                    // orthonormal: the adjoint is the inverse
                    acc(*a, haar_batch(&gy, true));
                }
                Op::Idwt(a) => acc(*a, haar_batch(&gy, false)),
            }
        }
        Gradients { grads }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const NORM_EPS: f64 = 1e-12;

fn row_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS)
}

fn nc_inner(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Haar analysis (`inverse == false`: [N,C,H,W] → [N,4C,H/2,W/2]) or synthesis.
fn haar_batch(t: &Tensor, inverse: bool) -> Tensor {
    let s = t.shape();
    let n = s[0];
    let per = t.len() / n;
    let mut out = vec![0.0; t.len()];
    let out_shape = if inverse {
        let c = s[1] / 4;
        for i in 0..n {
            haar_inverse(&t.data()[i * per..(i + 1) * per], c, s[2] * 2, s[3] * 2, &mut out[i * per..(i + 1) * per]);
        }
        vec![n, c, s[2] * 2, s[3] * 2]
    } else {
        for i in 0..n {
            haar_forward(&t.data()[i * per..(i + 1) * per], s[1], s[2], s[3], &mut out[i * per..(i + 1) * per]);
        }
        vec![n, s[1] * 4, s[2] / 2, s[3] / 2]
    };
    Tensor::new(out_shape, out)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c_in, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (c_out, k) = (w.dim(0), w.dim(2));
    assert_eq!(w.dim(1), c_in, "conv2d channel mismatch: input {c_in}, weight {:?}", w.shape());
    let geom = ConvGeom { c_in, h, w: wd, k, stride, pad };
    let (ho, wo) = geom.out_hw();
    let (rows, ncol) = (geom.col_rows(), ho * wo);
    let mut out = vec![0.0; n * c_out * ncol];
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncol] };
    for i in 0..n {
        let xi = &x.data()[i * c_in * h * wd..(i + 1) * c_in * h * wd];
        let src: &[f64] = if geom.is_pointwise() {
            xi
        } else {
            im2col(xi, &geom, &mut cols);
            &cols
        };
        let oi = &mut out[i * c_out * ncol..(i + 1) * c_out * ncol];
        if let Some(b) = b {
            for (co, chunk) in oi.chunks_mut(ncol).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        gemm(c_out, rows, ncol, 1.0, w.data(), rows as isize, 1, src, ncol as isize, 1, 1.0, oi, ncol as isize, 1);
    }
    Tensor::new(vec![n, c_out, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, c_in, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (c_out, k) = (w.dim(0), w.dim(2));
    let geom = ConvGeom { c_in, h, w: wd, k, stride, pad };
    let (ho, wo) = geom.out_hw();
    let (rows, ncol) = (geom.col_rows(), ho * wo);
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    let mut gb = want_b.then(|| vec![0.0; c_out]);
    let mut cols = vec![0.0; rows * ncol];
    let mut gcols = vec![0.0; rows * ncol];
    for i in 0..n {
        let gyi = &gy.data()[i * c_out * ncol..(i + 1) * c_out * ncol];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in gyi.chunks(ncol).enumerate() {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
        let xi = &x.data()[i * c_in * h * wd..(i + 1) * c_in * h * wd];
        if let Some(gw) = gw.as_mut() {
            let src: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut cols);
                &cols
            };
            // gW[co, r] += Σ_p gy[co, p] · cols[r, p]
            gemm(c_out, ncol, rows, 1.0, gyi, ncol as isize, 1, src, 1, ncol as isize, 1.0, gw, rows as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            let gxi = &mut gx[i * c_in * h * wd..(i + 1) * c_in * h * wd];
            if geom.is_pointwise() {
                gemm(
                    rows,
                    c_out,
                    ncol,
                    1.0,
                    w.data(),
                    1,
                    rows as isize,
                    gyi,
                    ncol as isize,
                    1,
                    1.0,
                    gxi,
                    ncol as isize,
                    1,
                );
            } else {
                gemm(
                    rows,
                    c_out,
                    ncol,
                    1.0,
                    w.data(),
                    1,
                    rows as isize,
                    gyi,
                    ncol as isize,
                    1,
                    0.0,
                    &mut gcols,
                    ncol as isize,
                    1,
                );
                col2im(&gcols, &geom, gxi);
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::new(w.shape().to_vec(), d)),
        gb.map(|d| Tensor::new(vec![c_out], d)),
    )
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.grad_of(self.id)
    }

    /// Value as an owned tensor.
    pub fn to_tensor(&self) -> Tensor {
        self.value().as_ref().clone()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, needs)
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(*self)
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        let v = self.value().map(|a| a + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Adds a per-(item, channel) value `v: [N, C]` across the trailing dims of `self: [N, C, ...]`.
    pub fn add_channels(&self, v: Var<'g>) -> Var<'g> {
        let x = self.value();
        let vv = v.value();
        let (n, c, inner) = nc_inner(x.shape());
        assert_eq!(vv.shape(), &[n, c], "add_channels shape mismatch");
        let mut out = x.as_ref().clone();
        for (chunk, &b) in out.data_mut().chunks_mut(inner).zip(vv.data()) {
            chunk.iter_mut().for_each(|o| *o += b);
        }
        self.binary(v, out, Op::AddChannels { x: self.id, v: v.id })
    }

    /// Multiplies by a per-(item, channel) value `v: [N, C]`.
    pub fn mul_channels(&self, v: Var<'g>) -> Var<'g> {
        let x = self.value();
        let vv = v.value();
        let (n, c, inner) = nc_inner(x.shape());
        assert_eq!(vv.shape(), &[n, c], "mul_channels shape mismatch");
        let mut out = x.as_ref().clone();
        for (chunk, &s) in out.data_mut().chunks_mut(inner).zip(vv.data()) {
            chunk.iter_mut().for_each(|o| *o *= s);
        }
        self.binary(v, out, Op::MulChannels { x: self.id, v: v.id })
    }

    pub fn relu(&self) -> Var<'g> {
        let v = self.value().map(|a| a.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        let v = self.value().map(|a| if a > 0.0 { a } else { a * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn silu(&self) -> Var<'g> {
        let v = self.value().map(|a| a * sigmoid(a));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        let v = self.value().map(|a| a.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    /// Applies `f` in the forward pass and passes gradients through unchanged.
    pub fn straight_through(&self, f: impl Fn(f64) -> f64) -> Var<'g> {
        let v = self.value().map(f);
        self.unary(v, Op::StraightThrough(self.id))
    }

    /// 2-D convolution, NCHW input, OIkk weight, square kernel.
    pub fn conv2d(&self, w: Var<'g>, b: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let bv = b.map(|b| b.value());
        let out = conv2d_forward(&self.value(), &w.value(), bv.as_deref(), stride, pad);
        let needs = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.graph.push(out, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), stride, pad }, needs)
    }

    /// Nearest-neighbour 2× upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = x.data()[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        self.unary(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2x(self.id))
    }

    /// Mean over all dims after the second: [N, C, ...] → [N, C].
    pub fn mean_spatial(&self) -> Var<'g> {
        let x = self.value();
        let (n, c, inner) = nc_inner(x.shape());
        let data = x.data().chunks(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect();
        self.unary(Tensor::new(vec![n, c], data), Op::MeanSpatial(self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let v = self.value().as_ref().clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        assert!(start + len <= s[dim], "narrow out of range");
        let outer: usize = s[..dim].iter().product();
        let inner: usize = s[dim + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * s[dim] * inner + start * inner;
            data.extend_from_slice(&x.data()[off..off + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[dim] = len;
        self.unary(Tensor::new(shape, data), Op::Narrow { x: self.id, dim, start })
    }

    /// `x·Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let x = self.value();
        let wv = w.value();
        let (n, din) = (x.dim(0), x.dim(1));
        let dout = wv.dim(0);
        assert_eq!(wv.dim(1), din, "linear shape mismatch");
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bv = b.value();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, din, dout, 1.0, x.data(), din as isize, 1, wv.data(), 1, din as isize, 1.0, &mut out, dout as isize, 1);
        let needs = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.graph.push(Tensor::new(vec![n, dout], out), Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id) }, needs)
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row-wise L2 normalisation of a `[N, D]` matrix.
    pub fn l2_normalize_rows(&self) -> Var<'g> {
        let x = self.value();
        let d = x.dim(1);
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.unary(out, Op::L2NormalizeRows(self.id))
    }

    /// Row-wise dot product of two `[N, D]` matrices → `[N]`.
    pub fn row_dot(&self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "row_dot shape mismatch");
        let d = a.dim(1);
        let data = a
            .data()
            .chunks(d)
            .zip(b.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        self.binary(other, Tensor::new(vec![a.dim(0)], data), Op::RowDot(self.id, other.id))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Var<'g> {
        let x = self.value();
        let (n, k) = (x.dim(0), x.dim(1));
        assert_eq!(labels.len(), n, "label count mismatch");
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < k, "label out of range");
            let row = &x.data()[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        self.unary(Tensor::scalar(loss / n as f64), Op::CrossEntropy { logits: self.id, labels: labels.to_vec() })
    }

    /// Orthonormal Haar analysis: [N, C, H, W] → [N, 4C, H/2, W/2].
    pub fn dwt(&self) -> Var<'g> {
        let x = self.value();
        let s = x.shape();
        assert!(s[2].is_multiple_of(2) && s[3].is_multiple_of(2), "dwt needs even spatial dims");
        let v = haar_batch(&x, false);
        self.unary(v, Op::Dwt(self.id))
    }

    /// Inverse of [`Var::dwt`].
    pub fn idwt(&self) -> Var<'g> {
        let x = self.value();
        assert!(x.dim(1).is_multiple_of(4), "idwt needs 4·C channels");
        let v = haar_batch(&x, true);
        self.unary(v, Op::Idwt(self.id))
    }
}
