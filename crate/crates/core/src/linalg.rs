//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition,
//! Cholesky factorization, log-determinant and SPD inverse.
//!
//! Every matrix handled here is at most a few dozen rows, so the routines favor
//! accuracy and simplicity over blocking.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

fn square_dim<S: Scalar>(m: &Tensor<S>, op: &'static str) -> Result<usize> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(CoreError::InvalidShape {
            op,
            shape: m.shape().to_vec(),
            msg: "expected a square matrix".into(),
        });
    }
    Ok(m.shape()[0])
}

fn symmetry_tolerance<S: Scalar>() -> S {
    S::lit(1e-9).max(S::epsilon() * S::lit(100.0))
}

/// Largest |a_ij - a_ji|.
pub fn asymmetry<S: Scalar>(m: &Tensor<S>) -> S {
    let n = m.shape()[0];
    let mut worst = S::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m.at2(i, j) - m.at2(j, i)).abs());
        }
    }
    worst
}

fn check_symmetric<S: Scalar>(m: &Tensor<S>, op: &'static str) -> Result<usize> {
    let n = square_dim(m, op)?;
    let dev = asymmetry(m);
    if dev > symmetry_tolerance::<S>() {
        return Err(CoreError::Asymmetric(dev.as_f64()));
    }
    Ok(n)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen<S> {
    /// Eigenvalues in descending order.
    pub values: Vec<S>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Tensor<S>,
}

impl<S: Scalar> SymEigen<S> {
    /// `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> Tensor<S> {
        let n = self.values.len();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let mut acc = S::zero();
                for k in 0..n {
                    acc += self.vectors.at2(i, k) * self.values[k] * self.vectors.at2(j, k);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
/// `max(1e-12, 10·eps·‖A‖_F)`.
pub fn sym_eigen<S: Scalar>(m: &Tensor<S>) -> Result<SymEigen<S>> {
    let n = check_symmetric(m, "sym_eigen")?;
    // symmetrize exactly so rotations see a symmetric input
    let mut a = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (m.at2(i, j) + m.at2(j, i)) * S::lit(0.5);
        }
    }
    let mut v = Tensor::<S>::eye(n).into_data();
    let frob = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let tol = S::lit(1e-12).max(S::lit(10.0) * S::epsilon() * frob);

    let off = |a: &[S]| {
        let mut s = S::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) >= tol {
        if sweeps == MAX_SWEEPS {
            return Err(CoreError::NoConvergence(MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &k) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set2(r, col, v[r * n + k]);
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn sym_eigenvalues<S: Scalar>(m: &Tensor<S>) -> Result<Vec<S>> {
    Ok(sym_eigen(m)?.values)
}

/// Lower-triangular Cholesky factor, or `None` when a pivot is not positive.
pub fn cholesky<S: Scalar>(m: &Tensor<S>) -> Result<Option<Tensor<S>>> {
    let n = square_dim(m, "cholesky")?;
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = m.at2(j, j);
        for k in 0..j {
            d -= l.at2(j, k) * l.at2(j, k);
        }
        if !(d > S::zero()) {
            return Ok(None);
        }
        let djj = d.sqrt();
        l.set2(j, j, djj);
        for i in (j + 1)..n {
            let mut s = m.at2(i, j);
            for k in 0..j {
                s -= l.at2(i, k) * l.at2(j, k);
            }
            l.set2(i, j, s / djj);
        }
    }
    Ok(Some(l))
}

/// Inverse from a Cholesky factor `L` (so `A = L Lᵀ`); result is exactly symmetric.
pub fn cholesky_inverse<S: Scalar>(l: &Tensor<S>) -> Tensor<S> {
    let n = l.shape()[0];
    // L⁻¹ by forward substitution
    let mut linv = Tensor::zeros(&[n, n]);
    for i in 0..n {
        linv.set2(i, i, S::one() / l.at2(i, i));
        for j in 0..i {
            let mut s = S::zero();
            for k in j..i {
                s += l.at2(i, k) * linv.at2(k, j);
            }
            linv.set2(i, j, -s / l.at2(i, i));
        }
    }
    let mut inv = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = S::zero();
            for k in i..n {
                s += linv.at2(k, i) * linv.at2(k, j);
            }
            inv.set2(i, j, s);
            inv.set2(j, i, s);
        }
    }
    inv
}

fn add_jitter<S: Scalar>(m: &Tensor<S>, jitter: S) -> Tensor<S> {
    let n = m.shape()[0];
    let mut out = m.clone();
    for i in 0..n {
        let v = out.at2(i, i) + jitter;
        out.set2(i, i, v);
    }
    out
}

/// Value and gradient of `log det(S + jitter·I)`; the gradient is the
/// symmetric inverse `(S + jitter·I)⁻¹`.
pub fn logdet_psd<S: Scalar>(m: &Tensor<S>, jitter: S) -> Result<(S, Tensor<S>)> {
    check_symmetric(m, "logdet_psd")?;
    let shifted = add_jitter(m, jitter);
    match cholesky(&shifted)? {
        Some(l) => {
            let n = l.shape()[0];
            let logdet = (0..n).map(|i| l.at2(i, i).ln()).sum::<S>() * S::lit(2.0);
            Ok((logdet, cholesky_inverse(&l)))
        }
        None => {
            let smallest = sym_eigenvalues(&shifted)?
                .last()
                .copied()
                .unwrap_or_else(S::zero);
            Err(CoreError::NotPositiveDefinite(smallest.as_f64()))
        }
    }
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse<S: Scalar>(m: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(logdet_psd(m, S::zero())?.1)
}
