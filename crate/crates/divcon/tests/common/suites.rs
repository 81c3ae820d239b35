//! Property suites shared by the focused tests and the acceptance report.

use divcon::config::{GuidanceConfig, Method};
use divcon::core::{Rng, Tape, Tensor, Var};
use divcon::guidance::{
    consistency_objective, difference_matrices, difference_matrices_with, dpp_objective, particle_guidance_objective,
    proj, proj_rows, regulate_gradient,
};
use divcon::latent::{
    embedder_loss, interpolator_loss, loss_pairing, loss_reg_mean, loss_reg_proj, loss_similarity, Level,
};
use divcon::nn::Bound;
use divcon::sampler::{endpoint_on_tape, guidance_objective, GuidanceModels};

use super::*;

pub const GRAD_TOL: f64 = 1e-4;

/// Worst gradient error of one differentiable operation over its instances.
#[derive(Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn run(name: &'static str, instances: usize, seed: u64, f: impl Fn(&mut Rng) -> f64) -> GradCase {
    let worst = (0..instances)
        .map(|i| f(&mut Rng::new(seed * 1000 + i as u64)))
        .fold(0.0, f64::max);
    GradCase { name, instances, worst }
}

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Random readout so every output component contributes to the scalar.
fn readout(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Var {
    let flat = tape.reshape(y, &[r.len()]).unwrap();
    let r = tape.constant(r.clone());
    tape.dot(flat, r).unwrap()
}

fn median_of(build: impl Fn(&mut Tape<f64>) -> f64) -> f64 {
    build(&mut Tape::new())
}

/// Batch of `n` random latents, flattened `[n, numel]`.
fn latents(rng: &mut Rng, n: usize, w: &WorldConfig) -> Tensor<f64> {
    rng.normal_tensor(&[n, w.latent_numel()])
}

fn endpoint_stack(
    models: &GuidanceModels,
    flow: &divcon::flow::VelocityField,
    cfg: &GuidanceConfig,
    x: &Tensor<f64>,
    t: f64,
    stop_gradient: bool,
) -> f64 {
    let v = flow.velocity(x, &vec![t; x.shape()[0]], &vec![1; x.shape()[0]]).unwrap();
    let median = median_of(|tape| {
        let (_, xh) = endpoint_on_tape(tape, flow, x, &v, t, 1, stop_gradient).unwrap();
        guidance_objective(tape, models, cfg, xh, 1, None).unwrap().median
    });
    leaf_grad_error(x, &|tape, x| {
        let (leaf, xh) = endpoint_on_tape(tape, flow, x, &v, t, 1, stop_gradient).unwrap();
        let o = guidance_objective(tape, models, cfg, xh, 1, Some(median)).unwrap();
        (leaf, o.value)
    })
}

/// Every differentiable operation of the latent models and the guidance stack,
/// `instances` random draws each; the kernel median is frozen in both paths.
pub fn gradient_suite(instances: usize) -> Vec<GradCase> {
    let w = tiny_world();
    let shape = latent_shape(&w);
    let mut cases = Vec::new();

    cases.push(run("loss_similarity", instances, 1, |rng| {
        let (e, r) = (unit_rows(rng, 4, 4), unit_rows(rng, 4, 5));
        input_grad_error(&[e], &|t, v| loss_similarity(t, v[0], &r).unwrap())
    }));
    cases.push(run("loss_pairing", instances, 2, |rng| {
        let xs = [unit_rows(rng, 4, 4), unit_rows(rng, 4, 5), rng.normal_tensor(&[4, 5])];
        input_grad_error(&xs, &|t, v| loss_pairing(t, v[0], v[1], v[2]).unwrap())
    }));
    cases.push(run("loss_reg_mean", instances, 3, |rng| {
        let (e, p) = (unit_rows(rng, 4, 4), unit_rows(rng, 4, 4));
        input_grad_error(&[e], &|t, v| loss_reg_mean(t, v[0], &p).unwrap())
    }));
    cases.push(run("loss_reg_proj", instances, 4, |rng| {
        input_grad_error(&[rng.normal_tensor(&[4, 5])], &|t, v| loss_reg_proj(t, v[0]))
    }));
    for (name, level, seed) in [("embedder_loss_video", Level::Video, 5), ("embedder_loss_frame", Level::Frame, 6)] {
        cases.push(run(name, instances, seed, |rng| {
            let m = embedder(&w, level, rng);
            let batch: Vec<Tensor<f64>> = (0..3).map(|_| rng.normal_tensor(&shape)).collect();
            let refs: Vec<Tensor<f64>> = match level {
                Level::Video => (0..3).map(|_| unit_rows(rng, 1, 5).reshape(&[5]).unwrap()).collect(),
                Level::Frame => (0..3).map(|_| unit_rows(rng, w.latent_frames, 5)).collect(),
            };
            let prompt = rng.normal_tensor(&[5]);
            let refs_b: Vec<&Tensor<f64>> = batch.iter().collect();
            param_grad_error(&m.params, &|t, b| {
                embedder_loss(t, &m, b, &refs_b, &refs, &prompt, 10.0).unwrap().0
            })
        }));
    }
    cases.push(run("proj_rows", instances, 7, |rng| {
        let (e, a, r) = (rng.normal_tensor(&[3, 4]), rng.normal_tensor(&[4]), rng.normal_tensor(&[12]));
        input_grad_error(&[e, a], &|t, v| {
            let y = proj_rows(t, v[0], v[1]).unwrap().0;
            readout(t, y, &r)
        })
    }));
    for (name, video, seed) in [("dpp_objective", true, 8), ("dpp_objective_frame_only", false, 9)] {
        cases.push(run(name, instances, seed, |rng| {
            let n = 4;
            let xs = [unit_rows(rng, n, 4), unit_rows(rng, n * 3, 4).reshape(&[n, 3, 4]).unwrap()];
            let build_k = |t: &mut Tape<f64>, v: &[Var], med: Option<f64>| {
                difference_matrices_with(t, video.then_some(v[0]), v[1], med).unwrap()
            };
            let med = median_of(|t| {
                let v = [t.leaf(xs[0].clone()), t.leaf(xs[1].clone())];
                build_k(t, &v, None).median
            });
            input_grad_error(&xs, &|t, v| {
                let m = build_k(t, v, Some(med));
                dpp_objective(t, m.k, 1e-3).unwrap()
            })
        }));
    }
    cases.push(run("particle_guidance_objective", instances, 10, |rng| {
        let n = 4;
        let xs = [unit_rows(rng, n, 4), unit_rows(rng, n * 3, 4).reshape(&[n, 3, 4]).unwrap()];
        let med = median_of(|t| {
            let v = [t.leaf(xs[0].clone()), t.leaf(xs[1].clone())];
            difference_matrices(t, Some(v[0]), v[1]).unwrap().median
        });
        input_grad_error(&xs, &|t, v| {
            let m = difference_matrices_with(t, Some(v[0]), v[1], Some(med)).unwrap();
            particle_guidance_objective(t, m.d, m.median).unwrap()
        })
    }));
    cases.push(run("consistency_objective", instances, 11, |rng| {
        let interp = interpolator(&w, rng);
        let x = latents(rng, 3, &w);
        let r = rng.normal_tensor(&[3]);
        input_grad_error(&[x], &|t, v| {
            let b = Bound::new(&interp.params, t, false);
            let oc = consistency_objective(t, &interp, &b, v[0]).unwrap();
            readout(t, oc, &r)
        })
    }));
    cases.push(run("interpolator_loss", instances, 12, |rng| {
        let interp = interpolator(&w, rng);
        let x = latents(rng, 2, &w);
        param_grad_error(&interp.params, &|t, b| {
            let xv = t.constant(x.clone());
            interpolator_loss(t, &interp, b, xv, 0.1).unwrap()
        })
    }));
    cases.push(run("flow_velocity", instances, 13, |rng| {
        let f = flow(&w, rng);
        let x = latents(rng, 2, &w);
        let r = rng.normal_tensor(&[2 * w.latent_numel()]);
        let tt = [rng.uniform(), rng.uniform()];
        param_grad_error(&f.params, &|t, b| {
            let xv = t.constant(x.clone());
            let v = f.velocity_on_tape(t, b, xv, &tt, &[0, 1]).unwrap();
            readout(t, v, &r)
        })
    }));
    let ours = GuidanceConfig::default();
    let stacks: [(&'static str, GuidanceConfig, bool, u64); 4] = [
        ("guidance_stack_stop_gradient", ours.clone(), true, 14),
        ("guidance_stack_through_velocity", ours.clone(), false, 15),
        (
            "guidance_stack_frame_only",
            GuidanceConfig {
                use_video_term: false,
                ..ours.clone()
            },
            false,
            16,
        ),
        (
            "guidance_stack_particle_guidance",
            GuidanceConfig {
                method: Method::ParticleGuidance,
                ..ours.clone()
            },
            false,
            17,
        ),
    ];
    for (name, cfg, stop, seed) in stacks {
        cases.push(run(name, instances, seed, |rng| {
            let m = models(&w, rng);
            let f = flow(&w, rng);
            let x = latents(rng, 3, &w);
            endpoint_stack(&m, &f, &cfg, &x, rng.uniform() * 0.9, stop)
        }));
    }
    cases.push(run("consistency_through_velocity", instances, 18, |rng| {
        let m = models(&w, rng);
        let f = flow(&w, rng);
        let x = latents(rng, 3, &w);
        let t = rng.uniform() * 0.9;
        let v = f.velocity(&x, &[t; 3], &[0; 3]).unwrap();
        leaf_grad_error(&x, &|tape, x| {
            let (leaf, xh) = endpoint_on_tape(tape, &f, x, &v, t, 0, false).unwrap();
            let b = Bound::new(&m.interp.params, tape, false);
            let oc = consistency_objective(tape, &m.interp, &b, xh).unwrap();
            (leaf, tape.sum(oc))
        })
    }));
    cases
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Random pair with a controlled mix of aligned, opposed and orthogonal cases.
fn random_pair(rng: &mut Rng, i: usize) -> (Vec<f64>, Vec<f64>) {
    let d = 1 + rng.below(12);
    let a: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let mut b: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    match i % 5 {
        // exactly orthogonal to a
        0 => b = proj(&b, &a),
        // parallel or anti-parallel
        1 => b = a.iter().map(|x| x * (rng.normal() * 3.0)).collect(),
        // tiny
        2 => b.iter_mut().for_each(|x| *x *= 1e-14),
        _ => {}
    }
    (a, b)
}

#[derive(Debug, Default)]
pub struct RegulationReport {
    pub pairs: usize,
    pub negative_dot: usize,
    pub passthrough_mismatch: usize,
    pub norm_growth: usize,
    pub not_idempotent: usize,
}

impl RegulationReport {
    pub fn ok(&self) -> bool {
        self.negative_dot + self.passthrough_mismatch + self.norm_growth + self.not_idempotent == 0
    }
}

/// Checks the regulation invariants on `pairs` random `(g_d, g_c)`.
pub fn regulation_suite(pairs: usize) -> RegulationReport {
    let mut rng = Rng::new(4242);
    let mut rep = RegulationReport {
        pairs,
        ..Default::default()
    };
    for i in 0..pairs {
        let (gd, gc) = random_pair(&mut rng, i);
        let r = regulate_gradient(&gd, &gc);
        let scale = norm(&gd) * norm(&gc);
        if dot(&r.g, &gc) < -1e-12 * scale.max(1.0) {
            rep.negative_dot += 1;
        }
        // unchanged exactly when not conflicting; a conflict below rounding
        // level may leave the bits untouched (degenerate g_c always passes)
        let conflicting = dot(&gd, &gc) < 0.0 && norm(&gc) >= 1e-12;
        let negligible = r.alpha.abs() * norm(&gc) <= 1e-15 * norm(&gd);
        let unchanged = r.g == gd;
        if (conflicting && unchanged && !negligible) || (!conflicting && !unchanged) {
            rep.passthrough_mismatch += 1;
        }
        if norm(&r.g) > norm(&gd) * (1.0 + 1e-12) {
            rep.norm_growth += 1;
        }
        let again = regulate_gradient(&r.g, &gc);
        let drift: f64 = again.g.iter().zip(&r.g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if drift > 1e-12 * norm(&gd).max(1.0) {
            rep.not_idempotent += 1;
        }
    }
    rep
}

#[derive(Debug, Default)]
pub struct ProjReport {
    pub pairs: usize,
    pub worst_orthogonality: f64,
    pub worst_idempotence: f64,
}

/// Orthogonality `|Proj(a|b)·b|` (relative to `‖a‖‖b‖`) and idempotence on random pairs.
pub fn proj_suite(pairs: usize) -> ProjReport {
    let mut rng = Rng::new(777);
    let mut rep = ProjReport {
        pairs,
        ..Default::default()
    };
    for i in 0..pairs {
        let (a, b) = random_pair(&mut rng, i);
        let p = proj(&a, &b);
        if norm(&b) >= 1e-12 {
            rep.worst_orthogonality = rep.worst_orthogonality.max(dot(&p, &b).abs());
        }
        let pp = proj(&p, &b);
        let drift = pp.iter().zip(&p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        rep.worst_idempotence = rep.worst_idempotence.max(drift);
    }
    rep
}
