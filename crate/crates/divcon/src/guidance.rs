//! Diversity objectives, the consistency objective and gradient regulation.

use divcon_core::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::latent::LatentInterpolator;
use crate::nn::Bound;

const FLOOR: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the component of `a` along `b`; `a` passes through when `‖b‖ < 1e-12`.
pub fn proj(a: &[f64], b: &[f64]) -> Vec<f64> {
    let bb = dot(b, b);
    if bb.sqrt() < FLOOR {
        return a.to_vec();
    }
    let c = dot(a, b) / bb;
    a.iter().zip(b).map(|(x, y)| x - c * y).collect()
}

/// Row-wise [`proj`] of `e: [R, n]` against the vector `a: [n]` on a tape.
///
/// The flag is true when `a` was degenerate and nothing was removed.
pub fn proj_rows(tape: &mut Tape<f64>, e: Var, a: Var) -> Result<(Var, bool)> {
    let n = tape.shape(a)[0];
    if tape.value(a).norm2() < FLOOR {
        return Ok((e, true));
    }
    let col = tape.reshape(a, &[n, 1])?;
    let along = tape.matmul(e, col)?;
    let aa = tape.dot(a, a)?;
    let aa = tape.reshape(aa, &[1, 1])?;
    let coef = tape.div(along, aa)?;
    let row = tape.reshape(a, &[1, n])?;
    let removed = tape.mul(coef, row)?;
    Ok((tape.sub(e, removed)?, false))
}

/// Pairwise squared distances of the rows of `e: [n, ..., d]`, averaged over
/// the middle axes: `[n, n]`.
pub fn pairwise_sq_dist(tape: &mut Tape<f64>, e: Var) -> Result<Var> {
    let shape = tape.shape(e).to_vec();
    let n = shape[0];
    let inner: usize = shape[1..shape.len() - 1].iter().product();
    let d = *shape.last().expect("rank ≥ 2");
    let flat = tape.reshape(e, &[n, inner, d])?;
    let left = tape.reshape(flat, &[n, 1, inner, d])?;
    let right = tape.reshape(flat, &[1, n, inner, d])?;
    let diff = tape.sub(left, right)?;
    let sq = tape.square(diff);
    let per = tape.sum_axis(sq, 3)?;
    let mean = tape.mean_axis(per, 2)?;
    Ok(tape.reshape(mean, &[n, n])?)
}

/// Median of the strictly off-diagonal entries, floored at 1e-12.
pub fn off_diagonal_median(d: &Tensor<f64>) -> f64 {
    let n = d.shape()[0];
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d.at2(i, j))
        .collect();
    if v.is_empty() {
        return FLOOR;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let med = if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    };
    med.max(FLOOR)
}

#[derive(Clone, Copy, Debug)]
pub struct DiffMatrices {
    pub d_v: Option<Var>,
    pub d_f: Var,
    pub d: Var,
    pub k: Var,
    /// Detached median of the off-diagonal entries of `d`.
    pub median: f64,
}

/// `D_v`, `D_f`, `D` and `K = D / med(D)` from `e_v: [n, d]` and `e_f: [n, T, d]`.
pub fn difference_matrices(tape: &mut Tape<f64>, e_v: Option<Var>, e_f: Var) -> Result<DiffMatrices> {
    difference_matrices_with(tape, e_v, e_f, None)
}

/// As [`difference_matrices`], but scales by `median` when given instead of
/// measuring it, e.g. to hold it fixed across perturbed inputs.
pub fn difference_matrices_with(
    tape: &mut Tape<f64>,
    e_v: Option<Var>,
    e_f: Var,
    median: Option<f64>,
) -> Result<DiffMatrices> {
    let n = tape.shape(e_f)[0];
    if n < 2 {
        return Err(Error::Invalid(format!("difference matrices need n ≥ 2, got {n}")));
    }
    let d_f = pairwise_sq_dist(tape, e_f)?;
    let (d_v, d) = match e_v {
        Some(ev) => {
            let ev3 = {
                let s = tape.shape(ev).to_vec();
                tape.reshape(ev, &[s[0], 1, s[1]])?
            };
            let d_v = pairwise_sq_dist(tape, ev3)?;
            let sum = tape.add(d_v, d_f)?;
            (Some(d_v), tape.scale(sum, 0.5))
        }
        None => (None, d_f),
    };
    let median = median.unwrap_or_else(|| off_diagonal_median(tape.value(d)));
    let k = tape.scale(d, 1.0 / median);
    Ok(DiffMatrices {
        d_v,
        d_f,
        d,
        k,
        median,
    })
}

/// `log det(exp(−K) + εI)`.
pub fn dpp_objective(tape: &mut Tape<f64>, k: Var, jitter: f64) -> Result<Var> {
    let neg = tape.neg(k);
    let s = tape.exp(neg);
    Ok(tape.logdet_psd(s, jitter)?)
}

/// `Σ_{i<i'} −exp(−D/med(D))` with the median detached.
pub fn particle_guidance_objective(tape: &mut Tape<f64>, d: Var, median: f64) -> Result<Var> {
    let n = tape.shape(d)[0] as f64;
    let scaled = tape.scale(d, -1.0 / median);
    let sim = tape.exp(scaled);
    let total = tape.sum(sim);
    // the diagonal contributes exp(0) = 1 per sample; off-diagonal pairs appear twice
    let off = tape.add_scalar(total, -n);
    Ok(tape.scale(off, -0.5))
}

/// `O_c = −‖x̂₁ − M_c(x̂₁)‖` over interior frames, one value per row of `x: [n, numel]`.
pub fn consistency_objective(tape: &mut Tape<f64>, interp: &LatentInterpolator, bound: &Bound, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let out = interp.predict_on_tape(tape, bound, x)?;
    let r = tape.sub(out.pred, out.target)?;
    let width = tape.value(r).len() / n;
    let r = tape.reshape(r, &[n, width])?;
    let norms = tape.row_norm(r)?;
    Ok(tape.neg(norms))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regulated {
    pub g: Vec<f64>,
    /// `g_d · g_c / ‖g_c‖²`, zero when `g_c` is degenerate.
    pub alpha: f64,
}

/// Drops the part of `g_d` that is anti-aligned with `g_c`.
pub fn regulate_gradient(g_d: &[f64], g_c: &[f64]) -> Regulated {
    let cc = dot(g_c, g_c);
    if cc.sqrt() < FLOOR {
        return Regulated {
            g: g_d.to_vec(),
            alpha: 0.0,
        };
    }
    let alpha = dot(g_d, g_c) / cc;
    if alpha >= 0.0 {
        return Regulated {
            g: g_d.to_vec(),
            alpha,
        };
    }
    let g = g_d.iter().zip(g_c).map(|(d, c)| d - alpha * c).collect();
    Regulated { g, alpha }
}

/// `gamma · g/‖g‖ · ‖v‖`; zero when `g` vanishes.
pub fn diversity_velocity(g: &[f64], v_norm: f64, gamma: f64) -> Vec<f64> {
    let gn = dot(g, g).sqrt();
    if gn == 0.0 || gamma == 0.0 {
        return vec![0.0; g.len()];
    }
    let s = gamma * v_norm / gn;
    g.iter().map(|x| s * x).collect()
}
