//! Parameter binding, initialization and first-order optimizers shared by
//! every trainable model.

use std::collections::BTreeMap;

use divcon_core::io::ParamStore;
use divcon_core::{Rng, Scalar, Tape, Tensor, Var};

/// Parameters of a [`ParamStore`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds every entry; `trainable` parameters are leaves, the rest constants.
    pub fn new<S: Scalar>(store: &ParamStore<S>, tape: &mut Tape<S>, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn grads<S: Scalar>(&self, tape: &Tape<S>) -> BTreeMap<String, Tensor<S>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), tape.grad_or_zeros(v)))
            .collect()
    }
}

/// Gaussian initialization with standard deviation `gain / sqrt(fan_in)`.
pub fn scaled_normal<S: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<S> {
    let std = gain / (fan_in as f64).sqrt();
    rng.normal_tensor::<S>(shape).scale(S::lit(std))
}

/// Constant `[n, 2, h, w]` channels holding normalized (row, column) coordinates in [-1, 1].
pub fn coord_channels<S: Scalar>(n: usize, h: usize, w: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(n * 2 * h * w);
    let lin = |i: usize, len: usize| {
        if len == 1 {
            0.0
        } else {
            2.0 * i as f64 / (len - 1) as f64 - 1.0
        }
    };
    for _ in 0..n {
        for y in 0..h {
            for _ in 0..w {
                data.push(S::lit(lin(y, h)));
            }
        }
        for _ in 0..h {
            for x in 0..w {
                data.push(S::lit(lin(x, w)));
            }
        }
    }
    Tensor::new(vec![n, 2, h, w], data).expect("coordinate grid shape")
}

/// `x · w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> divcon_core::Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

/// Divides each row (last axis) by its L2 norm.
pub fn normalize_rows<S: Scalar>(tape: &mut Tape<S>, x: Var) -> divcon_core::Result<Var> {
    let shape = tape.shape(x).to_vec();
    let norms = tape.row_norm(x)?;
    let floor = tape.add_scalar(norms, S::lit(1e-12));
    let mut keep = shape.clone();
    *keep.last_mut().expect("rank ≥ 1") = 1;
    let floor = tape.reshape(floor, &keep)?;
    tape.div(x, floor)
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter state for SGD with momentum or Adam.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    first: BTreeMap<String, Tensor<S>>,
    second: BTreeMap<String, Tensor<S>>,
    steps: usize,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    /// One update of every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>, lr: f64) {
        self.steps += 1;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = S::lit(momentum);
                    for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                        *mi = mu * *mi + gi;
                    }
                    p.axpy(S::lit(-lr), m).expect("parameter shape");
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let (b1, b2) = (S::lit(beta1), S::lit(beta2));
                    let c1 = 1.0 - beta1.powi(self.steps as i32);
                    let c2 = 1.0 - beta2.powi(self.steps as i32);
                    let step = S::lit(lr * c2.sqrt() / c1);
                    let eps = S::lit(eps);
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..pd.len() {
                        let gi = g.data()[i];
                        md[i] = b1 * md[i] + (S::one() - b1) * gi;
                        vd[i] = b2 * vd[i] + (S::one() - b2) * gi * gi;
                        pd[i] -= step * md[i] / (vd[i].sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::Sgd { momentum: 0.9 }, OptimizerKind::adam()] {
            let mut store = ParamStore::<f64>::new();
            store.insert("w", Tensor::from_vec(vec![3.0, -2.0]));
            let mut opt = Optimizer::new(kind);
            for _ in 0..500 {
                let mut tape = Tape::new();
                let b = Bound::new(&store, &mut tape, true);
                let w = b.get("w");
                let l = tape.dot(w, w).unwrap();
                tape.backward(l).unwrap();
                opt.step(&mut store, &b.grads(&tape), 0.02);
            }
            assert!(store.get("w").unwrap().norm2() < 1e-2, "{kind:?}");
        }
    }

    #[test]
    fn rows_normalize_to_unit_length() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2, 2], &[3., 4., 0., 2.]).unwrap());
        let y = normalize_rows(&mut tape, x).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] - 0.6).abs() < 1e-12 && (v.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coordinate_grid_spans_unit_box() {
        let c = coord_channels::<f64>(1, 3, 2);
        assert_eq!(c.shape(), &[1, 2, 3, 2]);
        assert_eq!(&c.data()[..6], &[-1., -1., 0., 0., 1., 1.]);
        assert_eq!(&c.data()[6..], &[-1., 1., -1., 1., -1., 1.]);
    }
}
