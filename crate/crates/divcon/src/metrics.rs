//! Vendi diversity, interpolation-error consistency and summary statistics.

use divcon_core::linalg::sym_eigenvalues;
use divcon_core::Tensor;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::world::DecodedVideo;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vendi {
    pub raw: f64,
    /// `raw / n`.
    pub normalized: f64,
}

/// Exponentiated eigenvalue entropy of the cosine-similarity kernel divided by `n`.
pub fn vendi_score(embeddings: &[&[f64]]) -> Result<Vendi> {
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::Invalid("vendi score of an empty set".into()));
    }
    let rows: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            e.iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }).collect()
        })
        .collect();
    let mut k = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            k.set2(i, j, s);
            k.set2(j, i, s);
        }
    }
    let entropy: f64 = sym_eigenvalues(&k)?
        .into_iter()
        .map(|l| l.max(0.0))
        .filter(|&l| l > 0.0)
        .map(|l| -l * l.ln())
        .sum();
    let raw = entropy.exp();
    Ok(Vendi {
        raw,
        normalized: raw / n as f64,
    })
}

/// Interpolation weights for frame `j` of `t` frames: `(offset, weight)` pairs.
fn interpolation_taps(j: usize, t: usize) -> Vec<(isize, f64)> {
    if j >= 2 && j + 2 < t {
        vec![(-2, -1.0 / 16.0), (-1, 9.0 / 16.0), (1, 9.0 / 16.0), (2, -1.0 / 16.0)]
    } else {
        vec![(-1, 0.5), (1, 0.5)]
    }
}

/// Mean squared error of predicting every interior frame from its temporal
/// neighbours with Catmull-Rom weights (linear next to the ends).
pub fn consistency_mse(s: &DecodedVideo) -> Result<f64> {
    let t = s.frames();
    if t < 3 {
        return Err(Error::Invalid(format!("consistency needs ≥ 3 frames, got {t}")));
    }
    let fsize = s.tensor().len() / t;
    let mut total = 0.0;
    for j in 1..t - 1 {
        let taps = interpolation_taps(j, t);
        let cur = s.frame(j);
        for q in 0..fsize {
            let pred: f64 = taps
                .iter()
                .map(|&(o, w)| w * s.frame((j as isize + o) as usize)[q])
                .sum();
            total += (pred - cur[q]).powi(2);
        }
    }
    Ok(total / ((t - 2) * fsize) as f64)
}

/// Expected white-noise error: `1 + Σ w²` averaged over interior frames.
pub fn white_noise_consistency_mse(t: usize) -> f64 {
    (1..t - 1)
        .map(|j| 1.0 + interpolation_taps(j, t).iter().map(|(_, w)| w * w).sum::<f64>())
        .sum::<f64>()
        / (t - 2) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// 95% Student-t half-width; `None` with fewer than two values.
    pub ci95: Option<f64>,
    pub values: Vec<f64>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn summarize(values: Vec<f64>) -> Summary {
    let n = values.len();
    let ci95 = (n >= 2).then(|| {
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive dof");
        t.inverse_cdf(0.975) * sample_sd(&values) / (n as f64).sqrt()
    });
    Summary {
        mean: mean(&values),
        ci95,
        values,
    }
}

/// One-sided paired t-test of `mean(a − b) > 0`; p-value.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid("paired test needs two equal samples of size ≥ 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let sd = sample_sd(&d);
    if sd == 0.0 {
        return Ok(if m > 0.0 { 0.0 } else { 1.0 });
    }
    let stat = m / (sd / (d.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).expect("positive dof");
    Ok(1.0 - dist.cdf(stat))
}
