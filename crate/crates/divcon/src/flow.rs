//! Class-conditional velocity field, rectified-flow training and Euler sampling.

use divcon_core::io::ParamStore;
use divcon_core::rng::label_hash;
use divcon_core::{Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{FlowConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, linear, scaled_normal, Bound, Optimizer, OptimizerKind};
use crate::world::{Dataset, LatentVideo};

pub const TIME_FEATURES: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowDims {
    pub latent_shape: Vec<usize>,
    pub classes: usize,
    pub hidden: usize,
}

impl FlowDims {
    pub fn new(world: &WorldConfig, hidden: usize) -> Self {
        Self {
            latent_shape: world.latent_shape().to_vec(),
            classes: world.classes,
            hidden,
        }
    }

    pub fn numel(&self) -> usize {
        self.latent_shape.iter().product()
    }

    pub fn input(&self) -> usize {
        self.numel() + TIME_FEATURES + self.classes
    }
}

/// `sin(2^k t)` for `k = 0..8`.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    std::array::from_fn(|k| ((1u32 << k) as f64 * t).sin())
}

/// Features of the skip coefficient: the time features and `1/(1.05 − t)`,
/// which tracks the `−x/(1 − t)` growth of the ideal field near `t = 1`.
pub const SKIP_FEATURES: usize = TIME_FEATURES + 1;

pub fn skip_features(t: f64) -> [f64; SKIP_FEATURES] {
    let tf = time_features(t);
    std::array::from_fn(|k| if k < TIME_FEATURES { tf[k] } else { 1.0 / (1.05 - t) })
}

/// Time and class features for `n` rows, `[n, TIME_FEATURES + classes]`.
fn conditioning(dims: &FlowDims, t: &[f64], class: &[usize]) -> Tensor<f64> {
    let width = TIME_FEATURES + dims.classes;
    let mut data = vec![0.0; t.len() * width];
    for (r, (&ti, &c)) in t.iter().zip(class).enumerate() {
        let row = &mut data[r * width..(r + 1) * width];
        row[..TIME_FEATURES].copy_from_slice(&time_features(ti));
        row[TIME_FEATURES + c] = 1.0;
    }
    Tensor::new(vec![t.len(), width], data).expect("conditioning shape")
}

/// Two-hidden-layer tanh MLP predicting the latent velocity, plus a
/// time-dependent scalar multiple of the input.
///
/// The skip term carries the identity-like part of the velocity, which a
/// hidden layer narrower than the latent cannot represent.
#[derive(Clone, Debug)]
pub struct VelocityField {
    pub dims: FlowDims,
    pub params: ParamStore<f64>,
}

impl VelocityField {
    /// Random hidden layers and a zero output layer, so the initial field is zero.
    pub fn init(dims: FlowDims, rng: &mut Rng) -> Self {
        let (d_in, h, d_out) = (dims.input(), dims.hidden, dims.numel());
        let mut params = ParamStore::new();
        params.insert("w1", scaled_normal(rng, &[d_in, h], d_in, 1.0));
        params.insert("b1", Tensor::zeros(&[h]));
        params.insert("w2", scaled_normal(rng, &[h, h], h, 1.0));
        params.insert("b2", Tensor::zeros(&[h]));
        params.insert("w3", Tensor::zeros(&[h, d_out]));
        params.insert("b3", Tensor::zeros(&[d_out]));
        params.insert("skip_w", Tensor::zeros(&[SKIP_FEATURES, 1]));
        params.insert("skip_b", Tensor::zeros(&[1]));
        Self { dims, params }
    }

    /// `1/sqrt(numel)`: the skip coefficient touches every latent entry, so
    /// its raw curvature is `numel` times that of a single output weight.
    fn skip_gain(&self) -> f64 {
        1.0 / (self.dims.numel() as f64).sqrt()
    }

    /// Velocity for a batch `x: [n, numel]` with per-row time and class.
    pub fn velocity(&self, x: &Tensor<f64>, t: &[f64], class: &[usize]) -> Result<Tensor<f64>> {
        let cond = conditioning(&self.dims, t, class);
        let input = Tensor::concat(&[x, &cond], 1)?;
        let p = |k: &str| self.params.get(k);
        let layer = |h: &Tensor<f64>, w: &str, b: &str| -> Result<Tensor<f64>> {
            let mut out = h.matmul(p(w)?)?;
            let bias = p(b)?.data();
            for row in out.data_mut().chunks_mut(bias.len()) {
                row.iter_mut().zip(bias).for_each(|(o, &b)| *o += b);
            }
            Ok(out)
        };
        let h = layer(&input, "w1", "b1")?.map(f64::tanh);
        let h = layer(&h, "w2", "b2")?.map(f64::tanh);
        let mut out = layer(&h, "w3", "b3")?;
        let (sw, sb) = (p("skip_w")?.data(), p("skip_b")?.data()[0]);
        let numel = self.dims.numel();
        let gain = self.skip_gain();
        for (r, &ti) in t.iter().enumerate() {
            let s = gain * (sb + skip_features(ti).iter().zip(sw).map(|(f, w)| f * w).sum::<f64>());
            let xr = &x.data()[r * numel..(r + 1) * numel];
            out.data_mut()[r * numel..(r + 1) * numel]
                .iter_mut()
                .zip(xr)
                .for_each(|(o, &xi)| *o += s * xi);
        }
        Ok(out)
    }

    /// Velocity of one latent.
    pub fn velocity_one(&self, x: &LatentVideo, t: f64, class: usize) -> Result<Tensor<f64>> {
        let flat = x.tensor().reshape(&[1, self.dims.numel()])?;
        Ok(self.velocity(&flat, &[t], &[class])?.into_reshaped(&self.dims.latent_shape)?)
    }

    /// Velocity on a tape; `x` is `[n, numel]`.
    pub fn velocity_on_tape(
        &self,
        tape: &mut Tape<f64>,
        bound: &Bound,
        x: Var,
        t: &[f64],
        class: &[usize],
    ) -> Result<Var> {
        let cond = tape.constant(conditioning(&self.dims, t, class));
        let input = tape.concat(&[x, cond], 1)?;
        let h = linear(tape, input, bound.get("w1"), bound.get("b1"))?;
        let h = tape.tanh(h);
        let h = linear(tape, h, bound.get("w2"), bound.get("b2"))?;
        let h = tape.tanh(h);
        let out = linear(tape, h, bound.get("w3"), bound.get("b3"))?;
        let sf: Vec<f64> = t.iter().flat_map(|&ti| skip_features(ti)).collect();
        let sf = tape.constant(Tensor::new(vec![t.len(), SKIP_FEATURES], sf)?);
        let scale = linear(tape, sf, bound.get("skip_w"), bound.get("skip_b"))?;
        let scale = tape.scale(scale, self.skip_gain());
        let skip = tape.mul(x, scale)?;
        Ok(tape.add(out, skip)?)
    }
}

/// `x_t + (1 − t) v`.
pub fn extrapolate_x1(x_t: &Tensor<f64>, t: f64, v: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut out = x_t.clone();
    out.axpy(1.0 - t, v)?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FlowTraining {
    /// Last parameters with a finite loss.
    pub model: VelocityField,
    pub losses: Vec<f64>,
    /// Step at which the loss became non-finite, if it did.
    pub diverged_at: Option<usize>,
}

/// Rectified-flow regression of `x_1 − x_0` along straight paths.
pub fn train_flow(data: &Dataset, cfg: &FlowConfig, seed: u64) -> Result<FlowTraining> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let dims = FlowDims::new(&data.manifest.world, cfg.hidden);
    let root = Rng::new(seed).split(label_hash("flow"));
    let mut model = VelocityField::init(dims.clone(), &mut root.split(0));
    let mut rng = root.split(1);
    let mut opt = Optimizer::new(OptimizerKind::Sgd {
        momentum: cfg.momentum,
    });
    let numel = dims.numel();
    let b = cfg.batch_size;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut last_good = model.params.clone();
    for step in 0..cfg.steps {
        let mut xt = Vec::with_capacity(b * numel);
        let mut target = Vec::with_capacity(b * numel);
        let mut ts = Vec::with_capacity(b);
        let mut classes = Vec::with_capacity(b);
        for _ in 0..b {
            let s = &data.train[rng.below(data.train.len())];
            let t = rng.uniform();
            for &x1 in s.latent.tensor().data() {
                let x0 = rng.normal();
                xt.push((1.0 - t) * x0 + t * x1);
                target.push(x1 - x0);
            }
            ts.push(t);
            classes.push(s.class);
        }
        let mut tape = Tape::new();
        let bound = Bound::new(&model.params, &mut tape, true);
        let x = tape.constant(Tensor::new(vec![b, numel], xt)?);
        let y = tape.constant(Tensor::new(vec![b, numel], target)?);
        let v = model.velocity_on_tape(&mut tape, &bound, x, &ts, &classes)?;
        let diff = tape.sub(v, y)?;
        let sq = tape.square(diff);
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / b as f64);
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            model.params = last_good;
            return Ok(FlowTraining {
                model,
                losses,
                diverged_at: Some(step),
            });
        }
        losses.push(value);
        tape.backward(loss)?;
        last_good = model.params.clone();
        opt.step(&mut model.params, &bound.grads(&tape), cosine_lr(cfg.learning_rate, step, cfg.steps));
    }
    Ok(FlowTraining {
        model,
        losses,
        diverged_at: None,
    })
}

/// Euler integration of one or more trajectories sharing a class.
///
/// `x0: [n, numel]`; `observe(k, t_k, x_k, v_k)` sees every pre-update state.
pub fn euler_integrate(
    model: &VelocityField,
    x0: Tensor<f64>,
    class: usize,
    n_steps: usize,
    mut observe: impl FnMut(usize, f64, &Tensor<f64>, &Tensor<f64>),
) -> Result<Tensor<f64>> {
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps must be ≥ 1".into()));
    }
    let n = x0.shape()[0];
    let dt = 1.0 / n_steps as f64;
    let classes = vec![class; n];
    let mut x = x0;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let v = model.velocity(&x, &vec![t; n], &classes)?;
        observe(k, t, &x, &v);
        x.axpy(dt, &v)?;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                step: k,
                what: "euler state".into(),
            });
        }
    }
    Ok(x)
}

/// `x_0 ~ N(0, I)` integrated to `t = 1`.
pub fn euler_sample(model: &VelocityField, class: usize, n_steps: usize, rng: &mut Rng) -> Result<LatentVideo> {
    let shape = &model.dims.latent_shape;
    let x0 = rng.normal_tensor::<f64>(shape).into_reshaped(&[1, model.dims.numel()])?;
    let x = euler_integrate(model, x0, class, n_steps, |_, _, _, _| {})?;
    LatentVideo::new(x.into_reshaped(shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VelocityField {
        let dims = FlowDims {
            latent_shape: vec![3, 1, 2, 2],
            classes: 2,
            hidden: 8,
        };
        VelocityField::init(dims, &mut Rng::new(0))
    }

    #[test]
    fn zero_field_returns_initial_noise() {
        let m = tiny();
        let x = euler_sample(&m, 1, 7, &mut Rng::new(4)).unwrap();
        let x0 = Rng::new(4).normal_tensor::<f64>(&[3, 1, 2, 2]);
        assert_eq!(x.tensor(), &x0);
    }

    #[test]
    fn constant_field_is_exact() {
        let mut m = tiny();
        let c: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.4).collect();
        m.params.insert("b3", Tensor::from_vec(c.clone()));
        for steps in [1, 3, 50] {
            let x = euler_sample(&m, 0, steps, &mut Rng::new(2)).unwrap();
            let x0 = Rng::new(2).normal_tensor::<f64>(&[3, 1, 2, 2]);
            for ((a, b), ci) in x.tensor().data().iter().zip(x0.data()).zip(&c) {
                assert!((a - b - ci).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extrapolation_cases() {
        let x = Tensor::from_vec(vec![0.0]);
        let v = Tensor::from_vec(vec![2.0]);
        assert_eq!(extrapolate_x1(&x, 0.5, &v).unwrap().data(), &[1.0]);
        let xt = Tensor::from_vec(vec![1.5, -2.0]);
        assert_eq!(extrapolate_x1(&xt, 1.0, &Tensor::from_vec(vec![9.0, 9.0])).unwrap(), xt);
        let x0 = Tensor::from_vec(vec![0.3, 0.1]);
        let x1 = Tensor::from_vec(vec![-1.0, 2.0]);
        assert_eq!(extrapolate_x1(&x0, 0.0, &x1.sub(&x0).unwrap()).unwrap(), x1);
    }

    #[test]
    fn tape_and_direct_forward_agree() {
        let mut m = tiny();
        let mut rng = Rng::new(8);
        for name in ["w3", "b3", "b1"] {
            let shape = m.params.get(name).unwrap().shape().to_vec();
            m.params.insert(name, rng.normal_tensor(&shape));
        }
        let x = rng.normal_tensor::<f64>(&[2, 12]);
        let direct = m.velocity(&x, &[0.2, 0.9], &[0, 1]).unwrap();
        let mut tape = Tape::new();
        let b = Bound::new(&m.params, &mut tape, false);
        let xv = tape.constant(x);
        let v = m.velocity_on_tape(&mut tape, &b, xv, &[0.2, 0.9], &[0, 1]).unwrap();
        assert!(tape.value(v).sub(&direct).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn time_features_use_octave_frequencies() {
        let f = time_features(0.5);
        for (k, v) in f.iter().enumerate() {
            assert!((v - (0.5 * 2f64.powi(k as i32)).sin()).abs() < 1e-15);
        }
    }
}
