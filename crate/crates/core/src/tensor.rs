//! Dense row-major tensors.

use std::fmt;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// A dense, row-major array of scalars.
///
/// A rank-0 tensor (empty shape) holds exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(CoreError::InvalidShape {
                op: "new",
                shape,
                msg: "dimensions must be positive".into(),
            });
        }
        if numel(&shape) != data.len() {
            return Err(CoreError::InvalidShape {
                op: "new",
                msg: format!("shape holds {} elements, data has {}", numel(&shape), data.len()),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| S::lit(x)).collect())
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CoreError::InvalidShape {
                op: "from_rows",
                shape: vec![rows.len(), cols],
                msg: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(CoreError::InvalidShape {
                op: "item",
                shape: self.shape.clone(),
                msg: "expected exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite(context))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a 2-D position.
    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: S) {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    /// Row `i` of a matrix (or of any tensor viewed as `[shape[0], rest]`).
    pub fn row(&self, i: usize) -> &[S] {
        let c = self.len() / self.shape[0];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|x| x * s)
    }

    /// `self += s * other`, elementwise.
    pub fn axpy(&mut self, s: S, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                op: "axpy",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.axpy(S::one(), other)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_usize_lossy(self.len())
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        if self.len() != other.len() {
            return Err(CoreError::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(dot_slice(&self.data, &other.data))
    }

    pub fn norm2(&self) -> S {
        dot_slice(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(CoreError::InvalidShape {
                op: "transpose",
                shape: self.shape.clone(),
                msg: "expected a matrix".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(CoreError::InvalidShape {
                op: "sum_axis",
                shape: self.shape.clone(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data: out })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(CoreError::InvalidShape {
                op: "slice",
                shape: self.shape.clone(),
                msg: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, full, inner) = split_at_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| CoreError::InvalidShape {
            op: "concat",
            shape: vec![],
            msg: "no inputs".into(),
        })?;
        if axis >= first.rank() {
            return Err(CoreError::InvalidShape {
                op: "concat",
                shape: first.shape.clone(),
                msg: format!("axis {axis} out of range"),
            });
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = split_at_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::lit(x.as_f64())).collect(),
        }
    }
}

pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn dot_slice<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out += a[m×k] · b[k×n]`, row-major, i-k-j loop order.
pub(crate) fn gemm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` with `a: [k×m]`, `b: [k×n]`.
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: [m×k]`, `b: [n×k]`.
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot_slice(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid into an output of rank `rank`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Applies `f` elementwise with broadcasting.
pub fn broadcast_zip<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    op: &'static str,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape == b.shape {
        return a.zip_map(b, op, f);
    }
    let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| CoreError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let n = numel(&shape);
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data[ia], b.data[ib]));
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            ia -= sa[d] * shape[d];
            ib -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor { shape, data })
}

/// Sums a broadcast gradient back down to `target` shape.
pub fn reduce_to_shape<S: Scalar>(g: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if g.shape == target {
        return g.clone();
    }
    let strides = broadcast_strides(target, &g.shape);
    let mut out = vec![S::zero(); numel(target)];
    let shape = &g.shape;
    let mut idx = vec![0usize; shape.len()];
    let mut it = 0usize;
    for &v in &g.data {
        out[it] += v;
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            it += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            it -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    Tensor {
        shape: target.to_vec(),
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn componentwise_add_and_dot() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let v = t(&[2], &[3.0, 4.0]);
        assert_eq!(v.dot(&v).unwrap(), 25.0);
        assert_eq!(Tensor::<f64>::zeros(&[3, 2]).norm2(), 0.0);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        assert_eq!(a.transpose().unwrap().data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = t(&[2, 3], &[1., -2., 3., 0.5, 5., 6.]);
        let b = t(&[3, 2], &[7., 8., -9., 10., 11., 1.]);
        let reference = a.matmul(&b).unwrap();
        let mut tn = vec![0.0; 4];
        gemm_tn(a.transpose().unwrap().data(), b.data(), &mut tn, 2, 3, 2);
        let mut nt = vec![0.0; 4];
        gemm_nt(a.data(), b.transpose().unwrap().data(), &mut nt, 2, 3, 2);
        assert_eq!(reference.data(), &tn[..]);
        assert_eq!(reference.data(), &nt[..]);
    }

    #[test]
    fn broadcasting_and_reduction() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let col = t(&[2, 1], &[10., 20.]);
        let row = t(&[3], &[1., 1., 1.]);
        let s = broadcast_zip(&a, &col, "add", |x, y| x + y).unwrap();
        assert_eq!(s.data(), &[11., 12., 13., 24., 25., 26.]);
        let r = broadcast_zip(&a, &row, "add", |x, y| x + y).unwrap();
        assert_eq!(r.data(), &[2., 3., 4., 5., 6., 7.]);
        assert_eq!(reduce_to_shape(&a, &[2, 1]).data(), &[6., 15.]);
        assert_eq!(reduce_to_shape(&a, &[3]).data(), &[5., 7., 9.]);
        assert_eq!(reduce_to_shape(&a, &[]).data(), &[21.]);
    }

    #[test]
    fn axis_ops() {
        let a = t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>());
        assert_eq!(a.sum_axis(1).unwrap().data(), &[6., 9., 24., 27.]);
        let s = a.slice_axis(1, 1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.data(), &[2., 3., 4., 5., 8., 9., 10., 11.]);
        let left = a.slice_axis(1, 0, 1).unwrap();
        let back = Tensor::concat(&[&left, &s], 1).unwrap();
        assert_eq!(back, a);
    }
}
