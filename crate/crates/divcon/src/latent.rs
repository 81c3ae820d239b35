//! Latent-space embedders with alignment matrices, the latent frame
//! interpolator, their losses, training and evaluation.

use divcon_core::io::ParamStore;
use divcon_core::rng::label_hash;
use divcon_core::{Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{LatentConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::flow::{euler_integrate, extrapolate_x1, VelocityField};
use crate::guidance::proj_rows;
use crate::nn::{coord_channels, cosine_lr, linear, normalize_rows, scaled_normal, Bound, Optimizer, OptimizerKind};
use crate::world::{LatentVideo, PromptEmbedding, ReferenceEmbedding, World};

// ---- losses ----------------------------------------------------------------

/// `(1/N²) Σ (e_i·e_j − ẽ_i·ẽ_j)²` for `e: [N, n]` against fixed `e_ref: [N, m]`.
pub fn loss_similarity(tape: &mut Tape<f64>, e: Var, e_ref: &Tensor<f64>) -> Result<Var> {
    let n = tape.shape(e)[0];
    if n < 2 {
        return Err(Error::Invalid(format!("similarity loss needs N ≥ 2, got {n}")));
    }
    let target = e_ref.matmul(&e_ref.transpose()?)?;
    let et = tape.transpose(e)?;
    let gram = tape.matmul(e, et)?;
    let target = tape.constant(target);
    let diff = tape.sub(gram, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// `(1/N) Σ (1 − e_i · (A ẽ_i))` for `e: [N, n]`, `e_ref: [N, m]`, `a: [n, m]`.
pub fn loss_pairing(tape: &mut Tape<f64>, e: Var, e_ref: Var, a: Var) -> Result<Var> {
    let at = tape.transpose(a)?;
    let mapped = tape.matmul(e_ref, at)?;
    row_dot_gap(tape, e, mapped)
}

/// `1 − (1/N) Σ e_i · pooled_i`.
pub fn loss_reg_mean(tape: &mut Tape<f64>, e: Var, pooled: &Tensor<f64>) -> Result<Var> {
    if tape.shape(e) != pooled.shape() {
        return Err(Error::Invalid(format!(
            "pooled statistic {:?} does not match embeddings {:?}",
            pooled.shape(),
            tape.shape(e)
        )));
    }
    let p = tape.constant(pooled.clone());
    row_dot_gap(tape, e, p)
}

fn row_dot_gap(tape: &mut Tape<f64>, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    let dots = tape.sum_axis(prod, 1)?;
    let mean = tape.mean(dots);
    let neg = tape.neg(mean);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean of squared entries.
pub fn loss_reg_proj(tape: &mut Tape<f64>, a: Var) -> Var {
    let sq = tape.square(a);
    tape.mean(sq)
}

// ---- embedders ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Video,
    Frame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderDims {
    pub level: Level,
    pub latent_shape: Vec<usize>,
    pub conv_channels: usize,
    pub latent_dim: usize,
    pub image_dim: usize,
}

/// Convolutional embedder `M` plus its alignment matrix `A` and sparsity mask.
#[derive(Clone, Debug)]
pub struct LatentEmbedder {
    pub dims: EmbedderDims,
    /// Trainable: convolutions, head and `align`.
    pub params: ParamStore<f64>,
    /// 1 where `align` is masked to zero.
    pub mask: Tensor<f64>,
    /// Fixed projection of pooled latent means to the embedding dimension.
    pub pool: Tensor<f64>,
}

/// Frequencies per axis of the cosine maps that modulate the embedder input.
const POS_BASIS: usize = 2;

/// Non-constant separable cosine maps `cos(π(y+½)u/h)·cos(π(x+½)v/w)`, `u, v < POS_BASIS`.
fn cosine_maps(h: usize, w: usize) -> Vec<Vec<f64>> {
    let mut maps = Vec::new();
    for u in 0..POS_BASIS {
        for v in 0..POS_BASIS {
            if u + v == 0 {
                continue;
            }
            let cy = |y: usize| (std::f64::consts::PI * (y as f64 + 0.5) * u as f64 / h as f64).cos();
            let cx = |x: usize| (std::f64::consts::PI * (x as f64 + 0.5) * v as f64 / w as f64).cos();
            maps.push((0..h * w).map(|p| cy(p / w) * cx(p % w)).collect());
        }
    }
    maps
}

impl LatentEmbedder {
    pub fn init(dims: EmbedderDims, rng: &mut Rng) -> Self {
        let c = dims.latent_shape[1];
        let k = dims.conv_channels;
        let cin = c * POS_BASIS * POS_BASIS + 2;
        let mut params = ParamStore::new();
        params.insert("conv1_w", scaled_normal(rng, &[k, cin, 3, 3], cin * 9, 1.0));
        params.insert("conv1_b", Tensor::zeros(&[k]));
        params.insert("conv2_w", scaled_normal(rng, &[k, k, 3, 3], k * 9, 1.0));
        params.insert("conv2_b", Tensor::zeros(&[k]));
        params.insert("head_w", scaled_normal(rng, &[k, dims.latent_dim], k, 1.0));
        params.insert("head_b", Tensor::zeros(&[dims.latent_dim]));
        params.insert("align", scaled_normal(rng, &[dims.latent_dim, dims.image_dim], dims.image_dim, 1.0));
        let pool_in = match dims.level {
            Level::Video => dims.latent_shape[0] * c,
            Level::Frame => c,
        };
        let pool = scaled_normal(rng, &[pool_in, dims.latent_dim], pool_in, 1.0);
        let mask = Tensor::zeros(&[dims.latent_dim, dims.image_dim]);
        Self {
            dims,
            params,
            mask,
            pool,
        }
    }

    pub fn align(&self) -> &Tensor<f64> {
        self.params.get("align").expect("align present")
    }

    /// Unit-norm `M(x)` for `x: [B, T·C·H·W]`; `[B, n]` or `[B·T, n]` by level.
    pub fn raw_on_tape(&self, tape: &mut Tape<f64>, bound: &Bound, x: Var) -> Result<Var> {
        let [t, c, h, w] = self.shape4();
        let b = tape.shape(x)[0];
        let frames = tape.reshape(x, &[b * t, c, h, w])?;
        // Global mean pooling discards layout, so the latent also enters modulated
        // by low-frequency cosine maps; pooled features then see its coarse spectrum.
        let mut parts = vec![frames];
        for m in cosine_maps(h, w) {
            let tiled: Vec<f64> = (0..b * t * c).flat_map(|_| m.iter().copied()).collect();
            let map = tape.constant(Tensor::new(vec![b * t, c, h, w], tiled)?);
            parts.push(tape.mul(frames, map)?);
        }
        parts.push(tape.constant(coord_channels(b * t, h, w)));
        let input = tape.concat(&parts, 1)?;
        let k = self.dims.conv_channels;
        let h1 = tape.conv2d(input, bound.get("conv1_w"), bound.get("conv1_b"))?;
        let h1 = tape.tanh(h1);
        let h2 = tape.conv2d(h1, bound.get("conv2_w"), bound.get("conv2_b"))?;
        let h2 = tape.tanh(h2);
        let flat = tape.reshape(h2, &[b * t, k, h * w])?;
        let pooled = tape.mean_axis(flat, 2)?;
        let feats = match self.dims.level {
            Level::Video => {
                let per = tape.reshape(pooled, &[b, t, k])?;
                tape.mean_axis(per, 1)?
            }
            Level::Frame => pooled,
        };
        let out = linear(tape, feats, bound.get("head_w"), bound.get("head_b"))?;
        Ok(normalize_rows(tape, out)?)
    }

    /// `A · b` on the tape.
    pub fn prompt_direction(&self, tape: &mut Tape<f64>, bound: &Bound, b: &Tensor<f64>) -> Result<Var> {
        let m = b.len();
        let bv = tape.constant(b.reshape(&[m, 1])?);
        let ab = tape.matmul(bound.get("align"), bv)?;
        Ok(tape.reshape(ab, &[self.dims.latent_dim])?)
    }

    /// `Proj(M(x) | A b)`; the flag reports a degenerate prompt direction.
    pub fn embed_on_tape(&self, tape: &mut Tape<f64>, bound: &Bound, x: Var, b: &Tensor<f64>) -> Result<(Var, bool)> {
        let raw = self.raw_on_tape(tape, bound, x)?;
        let dir = self.prompt_direction(tape, bound, b)?;
        proj_rows(tape, raw, dir)
    }

    /// Pooled latent statistic per row of the embedding output.
    pub fn pooled_statistic(&self, xs: &[&Tensor<f64>]) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = xs
            .iter()
            .flat_map(|x| match self.dims.level {
                Level::Video => vec![spatial_means(x)],
                Level::Frame => {
                    let c = self.dims.latent_shape[1];
                    spatial_means(x).chunks(c).map(<[f64]>::to_vec).collect()
                }
            })
            .map(|m| {
                let p: Vec<f64> = (0..self.dims.latent_dim)
                    .map(|o| m.iter().enumerate().map(|(i, &v)| v * self.pool.at2(i, o)).sum())
                    .collect();
                unit(p)
            })
            .collect();
        Tensor::from_rows(&rows).expect("pooled rows")
    }

    /// Zeroes masked alignment entries.
    pub fn apply_mask(&mut self) {
        let mask = self.mask.clone();
        let a = self.params.get_mut("align").expect("align present");
        for (v, &m) in a.data_mut().iter_mut().zip(mask.data()) {
            if m != 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Grows the mask so that at least `fraction` of `align` is masked,
    /// choosing the smallest-magnitude unmasked entries.
    pub fn sparsify_to(&mut self, fraction: f64) {
        let len = self.mask.len();
        let target = ((fraction * len as f64).round() as usize).min(len);
        let masked = self.mask.data().iter().filter(|&&m| m != 0.0).count();
        if target > masked {
            let a = self.align().data().to_vec();
            let mut free: Vec<usize> = (0..len).filter(|&i| self.mask.data()[i] == 0.0).collect();
            free.sort_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs()).then(i.cmp(&j)));
            for &i in &free[..target - masked] {
                self.mask.data_mut()[i] = 1.0;
            }
        }
        self.apply_mask();
    }

    pub fn sparsity(&self) -> f64 {
        let zeros = self.align().data().iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / self.mask.len() as f64
    }

    fn shape4(&self) -> [usize; 4] {
        let s = &self.dims.latent_shape;
        [s[0], s[1], s[2], s[3]]
    }

    pub fn to_store(&self) -> ParamStore<f64> {
        let mut out = self.params.clone();
        out.insert("fixed.mask", self.mask.clone());
        out.insert("fixed.pool", self.pool.clone());
        out
    }

    pub fn from_store(dims: EmbedderDims, mut store: ParamStore<f64>) -> Result<Self> {
        let mask = store.get("fixed.mask")?.clone();
        let pool = store.get("fixed.pool")?.clone();
        let mut params = ParamStore::new();
        for (k, v) in store.iter() {
            if !k.starts_with("fixed.") {
                params.insert(k.clone(), v.clone());
            }
        }
        store = params;
        Ok(Self {
            dims,
            params: store,
            mask,
            pool,
        })
    }
}

/// Spatial mean per (frame, channel) of `[T, C, H, W]`, flattened.
pub fn spatial_means(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let plane = s[2] * s[3];
    x.data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

// ---- interpolator --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolatorDims {
    pub latent_shape: Vec<usize>,
    pub hidden: usize,
}

/// Predicts each interior latent frame from its two neighbours as their mean
/// plus a convolutional correction.
#[derive(Clone, Debug)]
pub struct LatentInterpolator {
    pub dims: InterpolatorDims,
    pub params: ParamStore<f64>,
}

impl LatentInterpolator {
    pub fn init(dims: InterpolatorDims, rng: &mut Rng) -> Result<Self> {
        if dims.latent_shape[0] < 3 {
            return Err(Error::Invalid("interpolator needs at least 3 latent frames".into()));
        }
        let c = dims.latent_shape[1];
        let k = dims.hidden;
        let mut params = ParamStore::new();
        params.insert("conv1_w", scaled_normal(rng, &[k, 2 * c, 3, 3], 2 * c * 9, 1.0));
        params.insert("conv1_b", Tensor::zeros(&[k]));
        params.insert("conv2_w", Tensor::zeros(&[c, k, 3, 3]));
        params.insert("conv2_b", Tensor::zeros(&[c]));
        Ok(Self { dims, params })
    }

    /// Predictions and targets for the interior frames of `x: [B, T·C·H·W]`,
    /// both `[B, T−2, C·H·W]`; also returns the neighbour mean.
    pub fn predict_on_tape(&self, tape: &mut Tape<f64>, bound: &Bound, x: Var) -> Result<Interior> {
        let s = &self.dims.latent_shape;
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        let fsize = c * h * w;
        let b = tape.shape(x)[0];
        let seq = tape.reshape(x, &[b, t, fsize])?;
        let prev = tape.slice(seq, 1, 0, t - 2)?;
        let next = tape.slice(seq, 1, 2, t - 2)?;
        let target = tape.slice(seq, 1, 1, t - 2)?;
        let pair = tape.concat(&[prev, next], 2)?;
        let pair = tape.reshape(pair, &[b * (t - 2), 2 * c, h, w])?;
        let h1 = tape.conv2d(pair, bound.get("conv1_w"), bound.get("conv1_b"))?;
        let h1 = tape.tanh(h1);
        let delta = tape.conv2d(h1, bound.get("conv2_w"), bound.get("conv2_b"))?;
        let delta = tape.reshape(delta, &[b, t - 2, fsize])?;
        let sum = tape.add(prev, next)?;
        let linear = tape.scale(sum, 0.5);
        let pred = tape.add(linear, delta)?;
        Ok(Interior { pred, target, linear })
    }

    /// Full-sequence prediction with boundary frames passed through.
    pub fn interpolate(&self, x: &LatentVideo) -> Result<LatentVideo> {
        let mut tape = Tape::new();
        let bound = Bound::new(&self.params, &mut tape, false);
        let t = x.frames();
        let flat = tape.constant(x.tensor().reshape(&[1, x.tensor().len()])?);
        let out = self.predict_on_tape(&mut tape, &bound, flat)?;
        let pred = tape.value(out.pred);
        let fsize = x.tensor().len() / t;
        let mut data = x.tensor().data().to_vec();
        data[fsize..(t - 1) * fsize].copy_from_slice(pred.data());
        LatentVideo::new(Tensor::new(x.tensor().shape().to_vec(), data)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Interior {
    pub pred: Var,
    pub target: Var,
    pub linear: Var,
}

// ---- trajectory bank -------------------------------------------------------------

/// One sampler trajectory: extrapolated endpoints at every step and the
/// reference embedding of its decoded final latent.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub class: usize,
    /// `x̂₁` after `k` steps, `k = 0..=steps`; the last entry is the final latent.
    pub states: Vec<Tensor<f64>>,
    pub reference: ReferenceEmbedding,
}

#[derive(Clone, Debug)]
pub struct TrajectoryBank {
    pub steps: usize,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBank {
    /// Runs the sampler for `per_class` trajectories of every class.
    pub fn generate(world: &World, flow: &VelocityField, per_class: usize, steps: usize, seed: u64) -> Result<Self> {
        let shape = world.cfg.latent_shape();
        let numel = world.cfg.latent_numel();
        let mut trajectories = Vec::with_capacity(per_class * world.cfg.classes);
        for class in 0..world.cfg.classes {
            let mut rng = Rng::new(seed).split(class as u64);
            let x0 = rng.normal_tensor::<f64>(&[per_class, numel]);
            let mut states: Vec<Vec<Tensor<f64>>> = vec![Vec::with_capacity(steps + 1); per_class];
            let mut err = None;
            let last = euler_integrate(flow, x0, class, steps, |_, t, x, v| {
                match extrapolate_x1(x, t, v) {
                    Ok(xh) => {
                        for (i, row) in xh.data().chunks(numel).enumerate() {
                            states[i].push(Tensor::new(shape.to_vec(), row.to_vec()).expect("latent shape"));
                        }
                    }
                    Err(e) => err = Some(e),
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            for (i, row) in last.data().chunks(numel).enumerate() {
                let final_latent = LatentVideo::new(Tensor::new(shape.to_vec(), row.to_vec())?)?;
                let reference = world.embed_latent(&final_latent)?;
                let mut s = std::mem::take(&mut states[i]);
                s.push(final_latent.0);
                trajectories.push(Trajectory {
                    class,
                    states: s,
                    reference,
                });
            }
        }
        Ok(Self { steps, trajectories })
    }

    fn by_class(&self, classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); classes];
        for (i, tr) in self.trajectories.iter().enumerate() {
            out[tr.class].push(i);
        }
        out
    }
}

// ---- training ----------------------------------------------------------------------

/// Flow-step window `[lo, hi]` of training stage `stage` (thirds of `[0, 1]`).
pub fn stage_steps(stage: usize, steps: usize) -> (usize, usize) {
    let bounds = |k: usize| -> usize {
        // smallest step whose time is at least k/3
        (0..=steps).find(|&s| 3 * s >= k * steps).unwrap_or(steps)
    };
    let lo = bounds(stage);
    let hi = if stage == 2 { steps } else { bounds(stage + 1) - 1 };
    (lo, hi)
}

/// Masked fraction after middle-stage step `step` (0-based).
pub fn sparsity_schedule(step: usize, stage_len: usize, every: usize, target: f64) -> Option<f64> {
    if (step + 1) % every != 0 {
        return None;
    }
    let events = (stage_len / every).max(1);
    let done = (step + 1) / every;
    Some(target * done.min(events) as f64 / events as f64)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub similarity: f64,
    pub pairing: f64,
    pub reg_mean: f64,
    pub reg_proj: f64,
    pub total: f64,
}

/// Projected reference embeddings used as similarity targets.
fn projected_refs(refs: &[&[f64]], prompt: &[f64]) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = refs.iter().map(|r| crate::guidance::proj(r, prompt)).collect();
    Tensor::from_rows(&rows).expect("reference rows")
}

/// `λ_s L_s + L_p + L_reg,m + L_reg,p` for one embedder on one single-class batch.
pub fn embedder_loss(
    tape: &mut Tape<f64>,
    model: &LatentEmbedder,
    bound: &Bound,
    batch: &[&Tensor<f64>],
    refs: &[Tensor<f64>],
    prompt: &Tensor<f64>,
    lambda_s: f64,
) -> Result<(Var, LossTerms)> {
    let numel = batch[0].len();
    let rows: Vec<f64> = batch.iter().flat_map(|x| x.data().iter().copied()).collect();
    let x = tape.constant(Tensor::new(vec![batch.len(), numel], rows)?);
    let raw = model.raw_on_tape(tape, bound, x)?;
    let dir = model.prompt_direction(tape, bound, prompt)?;
    let (e, _) = proj_rows(tape, raw, dir)?;
    let pooled = model.pooled_statistic(batch);
    let (n_img, b) = (model.dims.image_dim, batch.len());

    let (sim, e_ref_all) = match model.dims.level {
        Level::Video => {
            let raw: Vec<&[f64]> = refs.iter().map(|r| r.data()).collect();
            let target = projected_refs(&raw, prompt.data());
            (loss_similarity(tape, e, &target)?, target)
        }
        Level::Frame => {
            let t = model.dims.latent_shape[0];
            let n = model.dims.latent_dim;
            let e3 = tape.reshape(e, &[b, t, n])?;
            let mut acc: Option<Var> = None;
            for j in 0..t {
                let ej = tape.slice(e3, 1, j, 1)?;
                let ej = tape.reshape(ej, &[b, n])?;
                let raw: Vec<&[f64]> = refs.iter().map(|r| r.row(j)).collect();
                let target = projected_refs(&raw, prompt.data());
                let l = loss_similarity(tape, ej, &target)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            let sum = acc.expect("at least one frame");
            let all: Vec<&[f64]> = refs.iter().flat_map(|r| r.data().chunks(n_img)).collect();
            (tape.scale(sum, 1.0 / t as f64), projected_refs(&all, prompt.data()))
        }
    };
    let e_ref = tape.constant(e_ref_all);
    let pair = loss_pairing(tape, e, e_ref, bound.get("align"))?;
    // the regularizer acts on the model output itself, before the prompt projection
    let reg_m = loss_reg_mean(tape, raw, &pooled)?;
    let reg_p = loss_reg_proj(tape, bound.get("align"));
    let weighted = tape.scale(sim, lambda_s);
    let a = tape.add(weighted, pair)?;
    let a = tape.add(a, reg_m)?;
    let total = tape.add(a, reg_p)?;
    let terms = LossTerms {
        similarity: tape.scalar_value(sim)?,
        pairing: tape.scalar_value(pair)?,
        reg_mean: tape.scalar_value(reg_m)?,
        reg_proj: tape.scalar_value(reg_p)?,
        total: tape.scalar_value(total)?,
    };
    Ok((total, terms))
}

#[derive(Clone, Debug)]
pub struct EmbedderTraining {
    pub video: LatentEmbedder,
    pub frame: LatentEmbedder,
    /// Per step: (stage, video loss terms, frame loss terms).
    pub history: Vec<(usize, LossTerms, LossTerms)>,
}

fn reference_of(level: Level, r: &ReferenceEmbedding) -> Tensor<f64> {
    match level {
        Level::Video => r.video.clone(),
        Level::Frame => r.frames.clone(),
    }
}

/// Three-stage training of `M_v, A_v` and `M_f, A_f` on sampler trajectories.
pub fn train_embedders(
    bank: &TrajectoryBank,
    prompts: &[PromptEmbedding],
    world: &WorldConfig,
    cfg: &LatentConfig,
    seed: u64,
) -> Result<EmbedderTraining> {
    cfg.validate()?;
    let root = Rng::new(seed).split(label_hash("embedders"));
    let dims = |level, image_dim| EmbedderDims {
        level,
        latent_shape: world.latent_shape().to_vec(),
        conv_channels: cfg.conv_channels,
        latent_dim: cfg.embed_dim,
        image_dim,
    };
    let mut models = [
        LatentEmbedder::init(dims(Level::Video, world.embed_dim_video), &mut root.split(0)),
        LatentEmbedder::init(dims(Level::Frame, world.embed_dim_frame), &mut root.split(1)),
    ];
    let mut opts = [Optimizer::new(OptimizerKind::adam()), Optimizer::new(OptimizerKind::adam())];
    let mut rng = root.split(2);
    let groups = bank.by_class(world.classes);
    let total_steps = 3 * cfg.stage_steps;
    let mut history = Vec::with_capacity(total_steps);
    for stage in 0..3 {
        let (lo, hi) = stage_steps(stage, bank.steps);
        for s in 0..cfg.stage_steps {
            let global = stage * cfg.stage_steps + s;
            let class = rng.below(world.classes);
            let members = &groups[class];
            let picks: Vec<usize> = (0..cfg.batch_size).map(|_| members[rng.below(members.len())]).collect();
            let ks: Vec<usize> = picks.iter().map(|_| lo + rng.below(hi - lo + 1)).collect();
            let batch: Vec<&Tensor<f64>> = picks.iter().zip(&ks).map(|(&i, &k)| &bank.trajectories[i].states[k]).collect();
            let lr = cosine_lr(cfg.learning_rate, global, total_steps);
            let mut terms = Vec::with_capacity(2);
            for (model, opt) in models.iter_mut().zip(opts.iter_mut()) {
                let level = model.dims.level;
                let refs: Vec<Tensor<f64>> = picks.iter().map(|&i| reference_of(level, &bank.trajectories[i].reference)).collect();
                let prompt = match level {
                    Level::Video => &prompts[class].video,
                    Level::Frame => &prompts[class].frame,
                };
                let mut tape = Tape::new();
                let bound = Bound::new(&model.params, &mut tape, true);
                let (loss, t) = embedder_loss(&mut tape, model, &bound, &batch, &refs, prompt, cfg.lambda_s)?;
                if !t.total.is_finite() {
                    return Err(Error::NonFinite {
                        step: global,
                        what: format!("{level:?} embedder loss"),
                    });
                }
                tape.backward(loss)?;
                opt.step(&mut model.params, &bound.grads(&tape), lr);
                model.apply_mask();
                if stage == 1 {
                    if let Some(f) = sparsity_schedule(s, cfg.stage_steps, cfg.sparsify_every, cfg.target_sparsity) {
                        model.sparsify_to(f);
                    }
                }
                terms.push(t);
            }
            let f = terms.pop().expect("frame terms");
            let v = terms.pop().expect("video terms");
            history.push((stage, v, f));
        }
    }
    let [video, frame] = models;
    Ok(EmbedderTraining { video, frame, history })
}

/// `Σ_j ‖pred_j − x_j‖² + μ Σ_j ‖pred_j − ½(x_{j−1} + x_{j+1})‖²`, batch mean.
pub fn interpolator_loss(tape: &mut Tape<f64>, model: &LatentInterpolator, bound: &Bound, x: Var, mu: f64) -> Result<Var> {
    let b = tape.shape(x)[0] as f64;
    let out = model.predict_on_tape(tape, bound, x)?;
    let fit = tape.sub(out.pred, out.target)?;
    let fit = tape.square(fit);
    let fit = tape.sum(fit);
    let pull = tape.sub(out.pred, out.linear)?;
    let pull = tape.square(pull);
    let pull = tape.sum(pull);
    let pull = tape.scale(pull, mu);
    let total = tape.add(fit, pull)?;
    Ok(tape.scale(total, 1.0 / b))
}

#[derive(Clone, Debug)]
pub struct InterpolatorTraining {
    pub model: LatentInterpolator,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains `M_c`; an epoch is `interp_epoch_size` trajectories drawn at random
/// flow steps, split into minibatches.
pub fn train_interpolator(bank: &TrajectoryBank, world: &WorldConfig, cfg: &LatentConfig, seed: u64) -> Result<InterpolatorTraining> {
    if world.latent_frames < 3 {
        return Err(Error::Invalid("interpolator needs at least 3 latent frames".into()));
    }
    let root = Rng::new(seed).split(label_hash("interpolator"));
    let mut model = LatentInterpolator::init(
        InterpolatorDims {
            latent_shape: world.latent_shape().to_vec(),
            hidden: cfg.interp_channels,
        },
        &mut root.split(0),
    )?;
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let mut rng = root.split(1);
    let numel = world.latent_numel();
    let n = bank.trajectories.len();
    let per_epoch = cfg.interp_epoch_size.max(1);
    let batches = per_epoch.div_ceil(cfg.interp_batch);
    let total = cfg.interp_epochs * batches;
    let mut losses = Vec::with_capacity(cfg.interp_epochs);
    for epoch in 0..cfg.interp_epochs {
        let mut order: Vec<usize> = (0..per_epoch).map(|_| rng.below(n)).collect();
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.interp_batch).enumerate() {
            let mut rows = Vec::with_capacity(chunk.len() * numel);
            for &i in chunk {
                let k = rng.below(bank.steps + 1);
                rows.extend_from_slice(bank.trajectories[i].states[k].data());
            }
            let mut tape = Tape::new();
            let bound = Bound::new(&model.params, &mut tape, true);
            let x = tape.constant(Tensor::new(vec![chunk.len(), numel], rows)?);
            let loss = interpolator_loss(&mut tape, &model, &bound, x, cfg.interp_mu)?;
            let value = tape.scalar_value(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    what: "interpolator loss".into(),
                });
            }
            sum += value * chunk.len() as f64;
            tape.backward(loss)?;
            let lr = cosine_lr(cfg.interp_learning_rate, epoch * batches + bi, total);
            opt.step(&mut model.params, &bound.grads(&tape), lr);
        }
        losses.push(sum / per_epoch as f64);
    }
    Ok(InterpolatorTraining { model, losses })
}

// ---- evaluation ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub flow_step: usize,
    pub metric_name: String,
    pub model_value: f64,
    pub baseline_name: String,
    pub baseline_value: f64,
}

/// Frozen embedding values for a batch, `[B, n]` or `[B·T, n]`.
pub fn embed_values(model: &LatentEmbedder, batch: &[&Tensor<f64>], prompt: &Tensor<f64>) -> Result<Tensor<f64>> {
    let numel = batch[0].len();
    let rows: Vec<f64> = batch.iter().flat_map(|x| x.data().iter().copied()).collect();
    let mut tape = Tape::new();
    let bound = Bound::new(&model.params, &mut tape, false);
    let x = tape.constant(Tensor::new(vec![batch.len(), numel], rows)?);
    let (e, _) = model.embed_on_tape(&mut tape, &bound, x, prompt)?;
    Ok(tape.value(e).clone())
}

fn gram_mse(e: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let n = e.len();
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += (d(&e[i], &e[j]) - d(&target[i], &target[j])).powi(2);
        }
    }
    s / (n * n) as f64
}

/// Latent-mean baseline embeddings of one class: spatial means, unit-normalized
/// and projected against their own class mean.
fn latent_mean_baseline(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = rows.into_iter().map(unit).collect();
    let mut centre = vec![0.0; rows[0].len()];
    for r in &rows {
        centre.iter_mut().zip(r).for_each(|(c, &v)| *c += v);
    }
    rows.iter().map(|r| crate::guidance::proj(r, &centre)).collect()
}

/// Similarity and interpolation errors at the requested flow steps, within class.
pub fn eval_latent_models(
    video: &LatentEmbedder,
    frame: &LatentEmbedder,
    interp: &LatentInterpolator,
    test: &TrajectoryBank,
    prompts: &[PromptEmbedding],
    flow_steps: &[usize],
) -> Result<Vec<EvalRow>> {
    let classes = prompts.len();
    let groups = test.by_class(classes);
    let t_lat = video.dims.latent_shape[0];
    let c = video.dims.latent_shape[1];
    let n_img_f = frame.dims.image_dim;
    let mut rows = Vec::new();
    for &k in flow_steps {
        if k > test.steps {
            return Err(Error::Invalid(format!("flow step {k} beyond {}", test.steps)));
        }
        let (mut sv, mut sv_base, mut sf, mut sf_base) = (0.0, 0.0, 0.0, 0.0);
        let mut used = 0usize;
        let mut interp_sums = [0.0f64; 4];
        let mut interp_count = 0usize;
        for (class, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let batch: Vec<&Tensor<f64>> = members.iter().map(|&i| &test.trajectories[i].states[k]).collect();
            let refs: Vec<&ReferenceEmbedding> = members.iter().map(|&i| &test.trajectories[i].reference).collect();
            if members.len() >= 2 {
                used += 1;
                // video level
                let ev = embed_values(video, &batch, &prompts[class].video)?;
                let e_rows: Vec<Vec<f64>> = ev.data().chunks(video.dims.latent_dim).map(<[f64]>::to_vec).collect();
                let target: Vec<Vec<f64>> = refs
                    .iter()
                    .map(|r| crate::guidance::proj(r.video.data(), prompts[class].video.data()))
                    .collect();
                sv += gram_mse(&e_rows, &target);
                let base = latent_mean_baseline(batch.iter().map(|x| spatial_means(x)).collect());
                sv_base += gram_mse(&base, &target);
                // frame level, averaged over frames
                let ef = embed_values(frame, &batch, &prompts[class].frame)?;
                let nf = frame.dims.latent_dim;
                let (mut fm, mut fb) = (0.0, 0.0);
                for j in 0..t_lat {
                    let e_j: Vec<Vec<f64>> = (0..batch.len())
                        .map(|i| ef.row(i * t_lat + j).to_vec())
                        .collect();
                    debug_assert_eq!(e_j[0].len(), nf);
                    let tgt: Vec<Vec<f64>> = refs
                        .iter()
                        .map(|r| crate::guidance::proj(&r.frames.data()[j * n_img_f..(j + 1) * n_img_f], prompts[class].frame.data()))
                        .collect();
                    fm += gram_mse(&e_j, &tgt);
                    let base_j = latent_mean_baseline(
                        batch
                            .iter()
                            .map(|x| spatial_means(x)[j * c..(j + 1) * c].to_vec())
                            .collect(),
                    );
                    fb += gram_mse(&base_j, &tgt);
                }
                sf += fm / t_lat as f64;
                sf_base += fb / t_lat as f64;
            }
            // interpolation
            for x in &batch {
                let lv = LatentVideo::new((*x).clone())?;
                let pred = interp.interpolate(&lv)?;
                let fsize = x.len() / t_lat;
                for j in 1..t_lat - 1 {
                    let cur = lv.frame(j);
                    let (p, nx) = (lv.frame(j - 1), lv.frame(j + 1));
                    let m = pred.frame(j);
                    for q in 0..fsize {
                        let mean = 0.5 * (p[q] + nx[q]);
                        interp_sums[0] += (m[q] - cur[q]).powi(2);
                        interp_sums[1] += (p[q] - cur[q]).powi(2);
                        interp_sums[2] += (nx[q] - cur[q]).powi(2);
                        interp_sums[3] += (mean - cur[q]).powi(2);
                    }
                    interp_count += fsize;
                }
            }
        }
        let u = used.max(1) as f64;
        let row = |metric: &str, model: f64, base: &str, bv: f64| EvalRow {
            flow_step: k,
            metric_name: metric.into(),
            model_value: model,
            baseline_name: base.into(),
            baseline_value: bv,
        };
        rows.push(row("similarity_mse_video", sv / u, "latent_mean", sv_base / u));
        rows.push(row("similarity_mse_frame", sf / u, "latent_mean", sf_base / u));
        let ic = interp_count.max(1) as f64;
        let m = interp_sums[0] / ic;
        rows.push(row("interpolation_mse", m, "previous_frame", interp_sums[1] / ic));
        rows.push(row("interpolation_mse", m, "next_frame", interp_sums[2] / ic));
        rows.push(row("interpolation_mse", m, "mean_of_neighbors", interp_sums[3] / ic));
    }
    Ok(rows)
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("flow_step,metric_name,model_value,baseline_name,baseline_value\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.10e},{},{:.10e}\n",
            r.flow_step, r.metric_name, r.model_value, r.baseline_name, r.baseline_value
        ));
    }
    s
}
