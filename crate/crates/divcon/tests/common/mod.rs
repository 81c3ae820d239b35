#![allow(dead_code)]

use divcon::config::WorldConfig;
use divcon::core::io::ParamStore;
use divcon::core::{Rng, Tape, Tensor, Var};
use divcon::flow::{FlowDims, VelocityField};
use divcon::latent::{EmbedderDims, InterpolatorDims, LatentEmbedder, LatentInterpolator, Level};
use divcon::nn::Bound;
use divcon::sampler::GuidanceModels;
use divcon::world::PromptEmbedding;

pub const FD_STEP: f64 = 1e-5;

/// A world small enough for coordinate-wise finite differences.
pub fn tiny_world() -> WorldConfig {
    WorldConfig {
        classes: 2,
        latent_frames: 3,
        latent_channels: 2,
        latent_size: 4,
        video_channels: 2,
        video_size: 8,
        embed_dim_video: 5,
        embed_dim_frame: 5,
        reference_hidden: 8,
        train_per_class: 4,
        test_per_class: 2,
    }
}

pub fn latent_shape(w: &WorldConfig) -> Vec<usize> {
    w.latent_shape().to_vec()
}

/// Replaces every parameter with fresh Gaussian values of scale `s`.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng, s: f64) {
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    for k in names {
        let t = store.get_mut(&k).unwrap();
        *t = rng.normal_tensor::<f64>(t.shape()).scale(s);
    }
}

pub fn embedder(w: &WorldConfig, level: Level, rng: &mut Rng) -> LatentEmbedder {
    let dims = EmbedderDims {
        level,
        latent_shape: latent_shape(w),
        conv_channels: 3,
        latent_dim: 4,
        image_dim: 5,
    };
    let mut m = LatentEmbedder::init(dims, rng);
    randomize(&mut m.params, rng, 0.5);
    m
}

pub fn interpolator(w: &WorldConfig, rng: &mut Rng) -> LatentInterpolator {
    let dims = InterpolatorDims {
        latent_shape: latent_shape(w),
        hidden: 3,
    };
    let mut m = LatentInterpolator::init(dims, rng).unwrap();
    randomize(&mut m.params, rng, 0.4);
    m
}

pub fn flow(w: &WorldConfig, rng: &mut Rng) -> VelocityField {
    let mut f = VelocityField::init(FlowDims::new(w, 8), rng);
    randomize(&mut f.params, rng, 0.3);
    f
}

pub fn models(w: &WorldConfig, rng: &mut Rng) -> GuidanceModels {
    let prompts = (0..w.classes)
        .map(|_| PromptEmbedding {
            video: rng.normal_tensor(&[5]),
            frame: rng.normal_tensor(&[5]),
        })
        .collect();
    GuidanceModels {
        video: embedder(w, Level::Video, rng),
        frame: embedder(w, Level::Frame, rng),
        interp: interpolator(w, rng),
        prompts,
    }
}

pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.sub(b).unwrap().norm2();
    let scale = a.norm2() + b.norm2();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Worst relative error between reverse-mode and central-difference
/// gradients of the scalar `build(inputs)` over every input.
pub fn input_grad_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = build(&mut tape, &vs);
        tape.scalar_value(y).unwrap()
    };
    let mut tape = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = build(&mut tape, &vs);
    tape.backward(y).unwrap();
    let mut worst = 0.0f64;
    for (i, &v) in vs.iter().enumerate() {
        let analytic = tape.grad_or_zeros(v);
        let mut numeric = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            numeric.data_mut()[k] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Like [`input_grad_error`] for a builder that places `x` on the tape itself
/// and returns `(leaf, scalar)`.
pub fn leaf_grad_error(x: &Tensor<f64>, build: &dyn Fn(&mut Tape<f64>, &Tensor<f64>) -> (Var, Var)) -> f64 {
    let eval = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let (_, y) = build(&mut tape, x);
        tape.scalar_value(y).unwrap()
    };
    let mut tape = Tape::new();
    let (leaf, y) = build(&mut tape, x);
    tape.backward(y).unwrap();
    let analytic = tape.grad_or_zeros(leaf);
    let mut numeric = Tensor::zeros(x.shape());
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[k] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[k] -= FD_STEP;
        numeric.data_mut()[k] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
    }
    rel_err(&analytic, &numeric)
}

/// Worst relative gradient error over the parameters of `store`.
pub fn param_grad_error(store: &ParamStore<f64>, build: &dyn Fn(&mut Tape<f64>, &Bound) -> Var) -> f64 {
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let b = Bound::new(s, &mut tape, true);
        let y = build(&mut tape, &b);
        tape.scalar_value(y).unwrap()
    };
    let mut tape = Tape::new();
    let bound = Bound::new(store, &mut tape, true);
    let y = build(&mut tape, &bound);
    tape.backward(y).unwrap();
    let grads = bound.grads(&tape);
    let mut worst = 0.0f64;
    for (name, analytic) in &grads {
        let base = store.get(name).unwrap();
        let mut numeric = Tensor::zeros(base.shape());
        for k in 0..base.len() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[k] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[k] -= FD_STEP;
            numeric.data_mut()[k] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic, &numeric));
    }
    worst
}
pub mod default_run;
pub mod suites;
