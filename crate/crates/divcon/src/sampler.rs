//! Coupled Euler integration of a batch under model and diversity velocities.

use divcon_core::{Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{GuidanceConfig, Method};
use crate::error::{Error, Result};
use crate::flow::{extrapolate_x1, VelocityField};
use crate::guidance::{
    consistency_objective, difference_matrices_with, diversity_velocity, dpp_objective, particle_guidance_objective,
    regulate_gradient,
};
use crate::latent::{LatentEmbedder, LatentInterpolator};
use crate::nn::Bound;
use crate::world::{LatentVideo, PromptEmbedding};

/// Trained latent-space models used by guidance.
#[derive(Clone, Debug)]
pub struct GuidanceModels {
    pub video: LatentEmbedder,
    pub frame: LatentEmbedder,
    pub interp: LatentInterpolator,
    pub prompts: Vec<PromptEmbedding>,
}

/// Guidance scalars of one sample at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub sample: usize,
    /// Diversity objective of the batch (DPP log-det or particle-guidance sum).
    pub objective: f64,
    pub consistency: Option<f64>,
    pub alpha: Option<f64>,
    /// `g · g_c` for the gradient actually used.
    pub grad_dot_gc: Option<f64>,
    pub u_over_v: f64,
    pub degenerate_prompt: bool,
}

pub const TRACE_HEADER: &str = "step,t,sample,objective,consistency,alpha,grad_dot_gc,u_over_v,degenerate_prompt";

impl TraceRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{:.10e},{},{},{},{:.10e},{}",
            self.step,
            self.t,
            self.sample,
            self.objective,
            opt(self.consistency),
            opt(self.alpha),
            opt(self.grad_dot_gc),
            self.u_over_v,
            self.degenerate_prompt as u8
        )
    }
}

#[derive(Clone, Debug)]
pub struct JointOutput {
    pub samples: Vec<LatentVideo>,
    pub trace: Vec<TraceRow>,
}

/// Initial noise of sample `i` of a batch: its own split stream.
pub fn initial_noise(rng: &Rng, i: usize, shape: &[usize]) -> Tensor<f64> {
    rng.split(i as u64).normal_tensor(shape)
}

/// Places the extrapolated endpoint of `x: [n, numel]` on the tape; returns
/// the leaf gradients are read from and the endpoint.
///
/// With `stop_gradient` the endpoint itself is the leaf and `v` is used as a
/// constant; otherwise the leaf is `x` and the velocity is recomputed on the tape.
pub fn endpoint_on_tape(
    tape: &mut Tape<f64>,
    flow: &VelocityField,
    x: &Tensor<f64>,
    v: &Tensor<f64>,
    t: f64,
    class: usize,
    stop_gradient: bool,
) -> Result<(Var, Var)> {
    if stop_gradient {
        let leaf = tape.leaf(extrapolate_x1(x, t, v)?);
        return Ok((leaf, leaf));
    }
    let n = x.shape()[0];
    let leaf = tape.leaf(x.clone());
    let fb = Bound::new(&flow.params, tape, false);
    let vt = flow.velocity_on_tape(tape, &fb, leaf, &vec![t; n], &vec![class; n])?;
    let step_v = tape.scale(vt, 1.0 - t);
    Ok((leaf, tape.add(leaf, step_v)?))
}

/// Diversity objective on the tape and the median used to scale it.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceObjective {
    pub value: Var,
    pub median: f64,
    pub degenerate_prompt: bool,
}

/// Builds the configured diversity objective of `xh: [n, numel]` (the
/// extrapolated endpoints) for prompt `class`; `median` freezes the kernel scale.
pub fn guidance_objective(
    tape: &mut Tape<f64>,
    models: &GuidanceModels,
    cfg: &GuidanceConfig,
    xh: Var,
    class: usize,
    median: Option<f64>,
) -> Result<GuidanceObjective> {
    let n = tape.shape(xh)[0];
    let t_lat = models.frame.dims.latent_shape[0];
    let prompt = &models.prompts[class];
    let fb = Bound::new(&models.frame.params, tape, false);
    let (ef, deg_f) = models.frame.embed_on_tape(tape, &fb, xh, &prompt.frame)?;
    let ef = {
        let d = tape.shape(ef)[1];
        tape.reshape(ef, &[n, t_lat, d])?
    };
    let (ev, deg_v) = if cfg.use_video_term {
        let vb = Bound::new(&models.video.params, tape, false);
        let (ev, deg) = models.video.embed_on_tape(tape, &vb, xh, &prompt.video)?;
        (Some(ev), deg)
    } else {
        (None, false)
    };
    let mats = difference_matrices_with(tape, ev, ef, median)?;
    let value = match cfg.method {
        Method::ParticleGuidance => particle_guidance_objective(tape, mats.d, mats.median)?,
        Method::Dpp | Method::Ours => dpp_objective(tape, mats.k, cfg.jitter)?,
        Method::None => return Err(Error::Invalid("iid sampling has no diversity objective".into())),
    };
    Ok(GuidanceObjective {
        value,
        median: mats.median,
        degenerate_prompt: deg_f || deg_v,
    })
}

/// Per-sample guidance of one step, before the Euler update.
struct StepGuidance {
    u: Vec<Vec<f64>>,
    rows: Vec<TraceRow>,
}

#[allow(clippy::too_many_arguments)]
fn guidance_step(
    flow: &VelocityField,
    models: &GuidanceModels,
    cfg: &GuidanceConfig,
    x: &Tensor<f64>,
    v: &Tensor<f64>,
    t: f64,
    step: usize,
    class: usize,
) -> Result<StepGuidance> {
    let (n, numel) = (x.shape()[0], x.shape()[1]);
    let mut tape = Tape::new();
    let (root, xh) = endpoint_on_tape(&mut tape, flow, x, v, t, class, cfg.stop_gradient_through_velocity)?;
    let objective = guidance_objective(&mut tape, models, cfg, xh, class, None)?;
    let (objective, deg) = (objective.value, objective.degenerate_prompt);
    let obj_value = tape.scalar_value(objective)?;
    tape.backward(objective)?;
    let g_d = tape.grad_or_zeros(root);

    let consistency = if cfg.regulates() {
        tape.zero_grad();
        let cb = Bound::new(&models.interp.params, &mut tape, false);
        let oc = consistency_objective(&mut tape, &models.interp, &cb, xh)?;
        let total = tape.sum(oc);
        tape.backward(total)?;
        Some((tape.value(oc).clone(), tape.grad_or_zeros(root)))
    } else {
        None
    };

    let mut u = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let gd = &g_d.data()[i * numel..(i + 1) * numel];
        let vi = &v.data()[i * numel..(i + 1) * numel];
        let v_norm = vi.iter().map(|a| a * a).sum::<f64>().sqrt();
        let (g, oc, alpha, gdot) = match &consistency {
            Some((oc, gc)) => {
                let gc = &gc.data()[i * numel..(i + 1) * numel];
                let r = regulate_gradient(gd, gc);
                let dot = r.g.iter().zip(gc).map(|(a, b)| a * b).sum();
                (r.g, Some(oc.data()[i]), Some(r.alpha), Some(dot))
            }
            None => (gd.to_vec(), None, None, None),
        };
        let ui = diversity_velocity(&g, v_norm, cfg.gamma);
        let un = ui.iter().map(|a| a * a).sum::<f64>().sqrt();
        rows.push(TraceRow {
            step,
            t,
            sample: i,
            objective: obj_value,
            consistency: oc,
            alpha,
            grad_dot_gc: gdot,
            u_over_v: if v_norm > 0.0 { un / v_norm } else { 0.0 },
            degenerate_prompt: deg,
        });
        u.push(ui);
    }
    Ok(StepGuidance { u, rows })
}

/// Integrates `x0: [n, numel]` jointly; guidance is skipped for `Method::None`,
/// `gamma = 0` and `t ≥ t_max`.
pub fn joint_sample_from_noise(
    flow: &VelocityField,
    models: Option<&GuidanceModels>,
    cfg: &GuidanceConfig,
    x0: Tensor<f64>,
    n_steps: usize,
    class: usize,
) -> Result<JointOutput> {
    let n = x0.shape()[0];
    let numel = flow.dims.numel();
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps must be ≥ 1".into()));
    }
    let guided = cfg.method != Method::None && cfg.gamma != 0.0;
    let models = match (guided, models) {
        (false, _) => None,
        (true, Some(m)) => Some(m),
        (true, None) => return Err(Error::Invalid("guided sampling needs latent models".into())),
    };
    if guided && n < 2 {
        return Err(Error::Invalid("guided sampling needs n ≥ 2".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let classes = vec![class; n];
    let mut x = x0;
    let mut trace = Vec::new();
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let v = flow.velocity(&x, &vec![t; n], &classes)?;
        match models {
            Some(m) if t < cfg.t_max => {
                let g = guidance_step(flow, m, cfg, &x, &v, t, k, class)?;
                let xd = x.data_mut();
                for (i, ui) in g.u.iter().enumerate() {
                    let off = i * numel;
                    for q in 0..numel {
                        xd[off + q] += dt * (v.data()[off + q] + ui[q]);
                    }
                }
                trace.extend(g.rows);
            }
            _ => x.axpy(dt, &v)?,
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                step: k,
                what: "joint sampler state".into(),
            });
        }
    }
    let shape = &flow.dims.latent_shape;
    let samples = x
        .data()
        .chunks(numel)
        .map(|row| LatentVideo::new(Tensor::new(shape.clone(), row.to_vec())?))
        .collect::<Result<_>>()?;
    Ok(JointOutput { samples, trace })
}

/// Joint sampling of `n` videos whose initial noise comes from `rng` split per sample.
pub fn joint_sample(
    flow: &VelocityField,
    models: Option<&GuidanceModels>,
    cfg: &GuidanceConfig,
    n: usize,
    n_steps: usize,
    class: usize,
    rng: &Rng,
) -> Result<JointOutput> {
    if n == 0 {
        return Err(Error::Invalid("n must be ≥ 1".into()));
    }
    let numel = flow.dims.numel();
    let mut data = Vec::with_capacity(n * numel);
    for i in 0..n {
        data.extend_from_slice(initial_noise(rng, i, &flow.dims.latent_shape).data());
    }
    joint_sample_from_noise(flow, models, cfg, Tensor::new(vec![n, numel], data)?, n_steps, class)
}
