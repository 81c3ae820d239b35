//! Tape-based reverse-mode differentiation over tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! topological order for [`Tape::backward`]. Tapes are rebuilt for every
//! evaluation; nothing is cached between forward passes.
//!
//! ```
//! use divcon_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let y = tape.dot(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{CoreError, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::{self, broadcast_zip, reduce_to_shape, split_at_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Dot(Var, Var),
    Norm(Var),
    RowNorm(Var),
    Conv2d(Var, Var, Var),
    LogDet(Var, Tensor<S>),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording of a computation, plus one gradient slot per node.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Result<S> {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient, `None` if the node was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor<S> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), "div", |x, y| x / y)?;
        Ok(self.push_op(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).scale(s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push_op(v, Op::Offset(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(S::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(S::exp);
        self.push_op(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(S::ln);
        self.push_op(v, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(S::sqrt);
        self.push_op(v, Op::Sqrt(a), &[a])
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push_op(v, Op::Transpose(a), &[a]))
    }

    /// Full contraction `Σ aᵢ bᵢ` of equally sized tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "dot",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let v = Tensor::scalar(va.dot(vb)?);
        Ok(self.push_op(v, Op::Dot(a, b), &[a, b]))
    }

    /// L2 norm of the whole tensor; the gradient at zero is taken as zero.
    pub fn norm2(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).norm2());
        self.push_op(v, Op::Norm(a), &[a])
    }

    /// L2 norm along the last axis, which is removed from the shape.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(CoreError::InvalidShape {
                op: "row_norm",
                shape: vec![],
                msg: "needs at least one axis".into(),
            });
        }
        let c = *x.shape().last().expect("rank ≥ 1");
        let data = x
            .data()
            .chunks(c)
            .map(|r| tensor::dot_slice(r, r).sqrt())
            .collect();
        let shape = x.shape()[..x.rank() - 1].to_vec();
        let v = Tensor::new(shape, data)?;
        Ok(self.push_op(v, Op::RowNorm(a), &[a]))
    }

    /// `log det(a + jitter·I)` for a symmetric positive-definite `a`.
    pub fn logdet_psd(&mut self, a: Var, jitter: S) -> Result<Var> {
        let (value, inverse) = linalg::logdet_psd(self.value(a), jitter)?;
        Ok(self.push_op(Tensor::scalar(value), Op::LogDet(a, inverse), &[a]))
    }

    // ---- reductions & shape --------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, S::one() / S::from_usize_lossy(n))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).sum_axis(axis)?;
        Ok(self.push_op(v, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self
            .shape(a)
            .get(axis)
            .copied()
            .ok_or_else(|| CoreError::InvalidShape {
                op: "mean_axis",
                shape: self.shape(a).to_vec(),
                msg: format!("axis {axis} out of range"),
            })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, S::one() / S::from_usize_lossy(n)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push_op(v, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        Ok(self.push_op(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_axis(axis, start, len)?;
        Ok(self.push_op(v, Op::Slice(a, axis, start), &[a]))
    }

    // ---- convolution ---------------------------------------------------

    /// Stride-1 "same" 2-D convolution.
    ///
    /// `input: [N, Cin, H, W]`, `weight: [Cout, Cin, K, K]` with odd `K`,
    /// `bias: [Cout]`; output `[N, Cout, H, W]` with zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = ConvGeom::new(x.shape(), w.shape(), b.shape())?;
        let out = conv2d_forward(&geom, x.data(), w.data(), b.data());
        let v = Tensor::new(vec![geom.n, geom.cout, geom.h, geom.w], out)?;
        Ok(self.push_op(v, Op::Conv2d(input, weight, bias), &[input, weight, bias]))
    }

    // ---- backward ------------------------------------------------------

    fn accumulate(&self, local: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut local[v.0] {
            Some(acc) => acc.add_assign(&g).expect("gradient shape matches value"),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulates `∂root/∂node` into every reachable node's gradient slot.
    ///
    /// Gradients add up across calls; use [`Tape::zero_grad`] in between.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(CoreError::NonScalarRoot(rv.shape().to_vec()));
        }
        let seed = Tensor::ones(rv.shape());
        let mut local: Vec<Option<Tensor<S>>> = vec![None; root.0 + 1];
        self.accumulate(&mut local, root, seed);

        for idx in (0..=root.0).rev() {
            let Some(g) = local[idx].clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let ga = reduce_to_shape(&g, self.shape(a));
                    let gb = reduce_to_shape(&g, self.shape(b));
                    self.accumulate(&mut local, a, ga);
                    self.accumulate(&mut local, b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to_shape(&g, self.shape(a));
                    let gb = reduce_to_shape(&g.scale(-S::one()), self.shape(b));
                    self.accumulate(&mut local, a, ga);
                    self.accumulate(&mut local, b, gb);
                }
                Op::Mul(a, b) => {
                    if self.wants(a) {
                        let full = broadcast_zip(&g, self.value(b), "mul", |x, y| x * y)?;
                        let ga = reduce_to_shape(&full, self.shape(a));
                        self.accumulate(&mut local, a, ga);
                    }
                    if self.wants(b) {
                        let full = broadcast_zip(&g, self.value(a), "mul", |x, y| x * y)?;
                        let gb = reduce_to_shape(&full, self.shape(b));
                        self.accumulate(&mut local, b, gb);
                    }
                }
                Op::Div(a, b) => {
                    if self.wants(a) {
                        let full = broadcast_zip(&g, self.value(b), "div", |x, y| x / y)?;
                        let ga = reduce_to_shape(&full, self.shape(a));
                        self.accumulate(&mut local, a, ga);
                    }
                    if self.wants(b) {
                        // d(a/b)/db = -out / b
                        let out = &self.nodes[idx].value;
                        let q = broadcast_zip(out, self.value(b), "div", |o, y| -o / y)?;
                        let full = g.mul(&q)?;
                        let gb = reduce_to_shape(&full, self.shape(b));
                        self.accumulate(&mut local, b, gb);
                    }
                }
                Op::Scale(a, s) => self.accumulate(&mut local, a, g.scale(s)),
                Op::Offset(a) => self.accumulate(&mut local, a, g),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.wants(a) {
                        let mut ga = vec![S::zero(); m * k];
                        tensor::gemm_nt(g.data(), self.value(b).data(), &mut ga, m, n, k);
                        self.accumulate(&mut local, a, Tensor::new(vec![m, k], ga)?);
                    }
                    if self.wants(b) {
                        let mut gb = vec![S::zero(); k * n];
                        tensor::gemm_tn(self.value(a).data(), g.data(), &mut gb, k, m, n);
                        self.accumulate(&mut local, b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Transpose(a) => self.accumulate(&mut local, a, g.transpose()?),
                Op::Sum(a) => {
                    let s = g.item()?;
                    let ga = Tensor::full(self.shape(a), s);
                    self.accumulate(&mut local, a, ga);
                }
                Op::SumAxis(a, axis) => {
                    let shape = self.shape(a).to_vec();
                    let (outer, len, inner) = split_at_axis(&shape, axis);
                    let mut out = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for _ in 0..len {
                            out.extend_from_slice(src);
                        }
                    }
                    self.accumulate(&mut local, a, Tensor::new(shape, out)?);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(a).to_vec();
                    self.accumulate(&mut local, a, g.into_reshaped(&shape)?);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.shape(p)[axis];
                        if self.wants(p) {
                            let gp = g.slice_axis(axis, start, len)?;
                            self.accumulate(&mut local, p, gp);
                        }
                        start += len;
                    }
                }
                Op::Slice(a, axis, start) => {
                    let shape = self.shape(a).to_vec();
                    let (outer, full, inner) = split_at_axis(&shape, axis);
                    let len = g.shape()[axis];
                    let mut out = vec![S::zero(); outer * full * inner];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        out[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    self.accumulate(&mut local, a, Tensor::new(shape, out)?);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = g.zip_map(y, "tanh", |gi, yi| gi * (S::one() - yi * yi))?;
                    self.accumulate(&mut local, a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.mul(&self.nodes[idx].value)?;
                    self.accumulate(&mut local, a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(a), "log", |gi, xi| gi / xi)?;
                    self.accumulate(&mut local, a, ga);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = g.zip_map(y, "sqrt", |gi, yi| gi * S::lit(0.5) / yi)?;
                    self.accumulate(&mut local, a, ga);
                }
                Op::Dot(a, b) => {
                    let s = g.item()?;
                    let ga = self.value(b).scale(s);
                    let gb = self.value(a).scale(s);
                    self.accumulate(&mut local, a, ga);
                    self.accumulate(&mut local, b, gb);
                }
                Op::Norm(a) => {
                    let s = g.item()?;
                    let nrm = self.nodes[idx].value.item()?;
                    let ga = if nrm > S::zero() {
                        self.value(a).scale(s / nrm)
                    } else {
                        Tensor::zeros(self.shape(a))
                    };
                    self.accumulate(&mut local, a, ga);
                }
                Op::RowNorm(a) => {
                    let x = self.value(a);
                    let c = *x.shape().last().expect("rank ≥ 1");
                    let norms = self.nodes[idx].value.data();
                    let mut out = Vec::with_capacity(x.len());
                    for (r, row) in x.data().chunks(c).enumerate() {
                        let coef = if norms[r] > S::zero() {
                            g.data()[r] / norms[r]
                        } else {
                            S::zero()
                        };
                        out.extend(row.iter().map(|&xi| xi * coef));
                    }
                    let ga = Tensor::new(x.shape().to_vec(), out)?;
                    self.accumulate(&mut local, a, ga);
                }
                Op::LogDet(a, inverse) => {
                    let s = g.item()?;
                    self.accumulate(&mut local, a, inverse.scale(s));
                }
                Op::Conv2d(input, weight, bias) => {
                    let geom = ConvGeom::new(
                        self.shape(input),
                        self.shape(weight),
                        self.shape(bias),
                    )?;
                    let (gx, gw, gb) = conv2d_backward(
                        &geom,
                        self.value(input).data(),
                        self.value(weight).data(),
                        g.data(),
                        self.wants(input),
                        self.wants(weight) || self.wants(bias),
                    );
                    if let Some(gx) = gx {
                        let t = Tensor::new(self.shape(input).to_vec(), gx)?;
                        self.accumulate(&mut local, input, t);
                    }
                    if let Some((gw, gb)) = gw.zip(gb) {
                        let tw = Tensor::new(self.shape(weight).to_vec(), gw)?;
                        let tb = Tensor::new(self.shape(bias).to_vec(), gb)?;
                        self.accumulate(&mut local, weight, tw);
                        self.accumulate(&mut local, bias, tb);
                    }
                }
            }
        }
        for (slot, g) in self.grads.iter_mut().zip(local) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.add_assign(&g)?,
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        Ok(())
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], b: &[usize]) -> Result<Self> {
        let bad = |lhs: &[usize], rhs: &[usize]| CoreError::ShapeMismatch {
            op: "conv2d",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] || w[2] % 2 == 0 {
            return Err(bad(x, w));
        }
        if b != [w[0]] {
            return Err(bad(w, b));
        }
        Ok(Self {
            n: x[0],
            cin: x[1],
            cout: w[0],
            h: x[2],
            w: x[3],
            k: w[2],
        })
    }

    /// Output rows `y` for which `y + dy` stays in-bounds, and the shift.
    fn span(&self, d: usize, extent: usize) -> (usize, usize, isize) {
        let p = (self.k / 2) as isize;
        let off = d as isize - p;
        let lo = (-off).max(0) as usize;
        let hi = (extent as isize - off).min(extent as isize).max(0) as usize;
        (lo, hi, off)
    }
}

fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let plane = g.h * g.w;
    let mut out = vec![S::zero(); g.n * g.cout * plane];
    for n in 0..g.n {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            o.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..g.cin {
                let xin = &x[(n * g.cin + ci) * plane..(n * g.cin + ci + 1) * plane];
                for ky in 0..g.k {
                    let (ylo, yhi, oy) = g.span(ky, g.h);
                    for kx in 0..g.k {
                        let wv = w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                        let (xlo, xhi, ox) = g.span(kx, g.w);
                        for y in ylo..yhi {
                            let sy = (y as isize + oy) as usize;
                            let orow = &mut o[y * g.w + xlo..y * g.w + xhi];
                            let sx0 = (xlo as isize + ox) as usize;
                            let irow = &xin[sy * g.w + sx0..sy * g.w + sx0 + (xhi - xlo)];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

type ConvGrads<S> = (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>);

fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    gout: &[S],
    want_x: bool,
    want_w: bool,
) -> ConvGrads<S> {
    let plane = g.h * g.w;
    let mut gx = want_x.then(|| vec![S::zero(); x.len()]);
    let mut gw = want_w.then(|| vec![S::zero(); w.len()]);
    let mut gb = want_w.then(|| vec![S::zero(); g.cout]);
    for n in 0..g.n {
        for co in 0..g.cout {
            let go = &gout[(n * g.cout + co) * plane..(n * g.cout + co + 1) * plane];
            if let Some(gb) = gb.as_mut() {
                gb[co] += go.iter().copied().sum::<S>();
            }
            for ci in 0..g.cin {
                let base = (n * g.cin + ci) * plane;
                for ky in 0..g.k {
                    let (ylo, yhi, oy) = g.span(ky, g.h);
                    for kx in 0..g.k {
                        let widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                        let wv = w[widx];
                        let (xlo, xhi, ox) = g.span(kx, g.w);
                        let mut acc = S::zero();
                        for y in ylo..yhi {
                            let sy = (y as isize + oy) as usize;
                            let sx0 = (xlo as isize + ox) as usize;
                            let grow = &go[y * g.w + xlo..y * g.w + xhi];
                            let s = base + sy * g.w + sx0;
                            if gw.is_some() {
                                acc += tensor::dot_slice(grow, &x[s..s + (xhi - xlo)]);
                            }
                            if let Some(gx) = gx.as_mut() {
                                for (d, &gv) in gx[s..s + (xhi - xlo)].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
