mod common;

use common::*;
use divcon::config::LatentConfig;
use divcon::core::{Rng, Tape, Tensor};
use divcon::guidance::consistency_objective;
use divcon::latent::{train_embedders, train_interpolator, Trajectory, TrajectoryBank};
use divcon::nn::Bound;
use divcon::world::{PromptEmbedding, ReferenceEmbedding, World};

fn small_latent() -> LatentConfig {
    LatentConfig {
        conv_channels: 3,
        embed_dim: 4,
        stage_steps: 40,
        batch_size: 4,
        sparsify_every: 5,
        interp_channels: 3,
        interp_epochs: 30,
        interp_epoch_size: 8,
        interp_batch: 4,
        eval_steps: vec![5, 10],
        ..LatentConfig::default()
    }
}

/// Latent whose frames move exactly linearly: `x_j = a + j b`.
fn linear_latent(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let fsize: usize = shape[1..].iter().product();
    let a: Vec<f64> = (0..fsize).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..fsize).map(|_| 0.3 * rng.normal()).collect();
    let data = (0..shape[0]).flat_map(|j| a.iter().zip(&b).map(move |(p, q)| p + j as f64 * q)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn linear_bank(rng: &mut Rng, steps: usize, count: usize) -> TrajectoryBank {
    let w = tiny_world();
    let shape = latent_shape(&w);
    let trajectories = (0..count)
        .map(|i| Trajectory {
            class: i % w.classes,
            states: (0..=steps).map(|_| linear_latent(rng, &shape)).collect(),
            reference: ReferenceEmbedding {
                video: Tensor::zeros(&[w.embed_dim_video]),
                frames: Tensor::zeros(&[w.latent_frames, w.embed_dim_frame]),
            },
        })
        .collect();
    TrajectoryBank { steps, trajectories }
}

fn interp_mse(interp: &divcon::latent::LatentInterpolator, x: &Tensor<f64>) -> f64 {
    let lv = divcon::world::LatentVideo::new(x.clone()).unwrap();
    let pred = interp.interpolate(&lv).unwrap();
    pred.tensor().sub(x).unwrap().data().iter().map(|d| d * d).sum::<f64>() / x.len() as f64
}

#[test]
fn interpolator_keeps_linear_motion_exact() {
    let mut rng = Rng::new(1);
    let bank = linear_bank(&mut rng, 10, 12);
    let run = train_interpolator(&bank, &tiny_world(), &small_latent(), 3).unwrap();
    let shape = latent_shape(&tiny_world());
    for _ in 0..10 {
        let x = linear_latent(&mut rng, &shape);
        // The neighbour mean is exact here. Adam cannot hold an exact zero-residual
        // optimum (sub-eps gradients give an lr/eps step), so allow a noise floor
        // far below the signal scale.
        let scale = x.data().iter().map(|d| d * d).sum::<f64>() / x.len() as f64;
        let mse = interp_mse(&run.model, &x);
        assert!(mse <= 1e-6 * scale, "mse {mse} scale {scale}");

        // a temporally shuffled copy is far less consistent
        let t = shape[0];
        let fsize = x.len() / t;
        let order = [1usize, 0, 2];
        let data: Vec<f64> = order.iter().flat_map(|&j| x.data()[j * fsize..(j + 1) * fsize].to_vec()).collect();
        let shuffled = Tensor::new(shape.clone(), data).unwrap();
        let oc = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let b = Bound::new(&run.model.params, &mut tape, false);
            let v = tape.constant(x.reshape(&[1, x.len()]).unwrap());
            let o = consistency_objective(&mut tape, &run.model, &b, v).unwrap();
            tape.value(o).data()[0]
        };
        assert!(oc(&x).abs() < oc(&shuffled).abs());
    }
}

#[test]
fn embedders_train_and_reach_target_sparsity() {
    let w = tiny_world();
    let mut rng = Rng::new(2);
    let f = flow(&w, &mut rng);
    let world = World::new(&w, 5);
    let bank = TrajectoryBank::generate(&world, &f, 4, 10, 6).unwrap();
    let prompts: Vec<PromptEmbedding> = (0..w.classes)
        .map(|c| {
            let members: Vec<&ReferenceEmbedding> =
                bank.trajectories.iter().filter(|t| t.class == c).map(|t| &t.reference).collect();
            PromptEmbedding::from_members(&members)
        })
        .collect();
    let mut cfg = small_latent();
    cfg.embed_dim = 4;
    let run = train_embedders(&bank, &prompts, &w, &cfg, 7).unwrap();
    assert_eq!(run.history.len(), 3 * cfg.stage_steps);
    for m in [&run.video, &run.frame] {
        assert!((m.sparsity() - cfg.target_sparsity).abs() < 0.1, "sparsity {}", m.sparsity());
        // masked entries stay zero
        let zeroed = m.align().data().iter().zip(m.mask.data()).all(|(a, k)| *k == 0.0 || *a == 0.0);
        assert!(zeroed);
    }
    let first = &run.history[0];
    let last = &run.history[run.history.len() - 1];
    assert!(last.1.total.is_finite() && last.2.total.is_finite());
    assert!(first.1.total.is_finite());
}
