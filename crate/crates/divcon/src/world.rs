//! The synthetic world: scene classes of moving Gaussian blobs in latent space,
//! a fixed linear decoder into video space, and fixed reference encoders that
//! play the part of pretrained video and frame embedders.

use std::fs;
use std::path::{Path, PathBuf};

use divcon_core::io::{load_tensor, save_tensor};
use divcon_core::rng::label_hash;
use divcon_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::nn::scaled_normal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Linear,
    Circular,
    Bounce,
}

/// Generative descriptor of one scene class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneClass {
    pub id: usize,
    pub blob_count: usize,
    pub motion: Motion,
    pub base_intensity: f64,
    /// Mean blob displacement per latent frame, in latent pixels.
    pub speed: f64,
    /// Direction of the blob colour in latent channel space.
    pub channel_angle: f64,
}

impl SceneClass {
    /// The default class catalog for `count` classes.
    pub fn catalog(count: usize) -> Vec<SceneClass> {
        (0..count)
            .map(|c| SceneClass {
                id: c,
                blob_count: 1 + c % 3,
                motion: match (c / 3) % 3 {
                    0 => Motion::Linear,
                    1 => Motion::Circular,
                    _ => Motion::Bounce,
                },
                base_intensity: 0.8 + 0.1 * (c % 4) as f64,
                speed: 0.6 + 0.15 * (c % 5) as f64,
                channel_angle: 2.0 * std::f64::consts::PI * c as f64 / count as f64,
            })
            .collect()
    }

    fn channel_weights(&self, channels: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..channels)
            .map(|k| (self.channel_angle + k as f64 * std::f64::consts::PI / channels as f64).cos())
            .collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.into_iter().map(|x| x / n).collect()
    }
}

/// Generator state `[T_lat, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo(pub Tensor<f64>);

impl LatentVideo {
    pub fn new(t: Tensor<f64>) -> Result<Self> {
        if t.rank() != 4 || t.shape()[0] < 3 {
            return Err(Error::Invalid(format!(
                "latent video must be [T≥3, C, H, W], got {:?}",
                t.shape()
            )));
        }
        t.check_finite("latent video")?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frame(&self, j: usize) -> &[f64] {
        self.0.row(j)
    }
}

/// Decoded clip `[T_vid, C_v, H_v, W_v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedVideo(pub Tensor<f64>);

impl DecodedVideo {
    pub fn tensor(&self) -> &Tensor<f64> {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        self.0.row(k)
    }
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let mut y = (x - lo).rem_euclid(2.0 * span);
    if y > span {
        y = 2.0 * span - y;
    }
    lo + y
}

/// One randomized moving-blob latent video of the given class.
pub fn synth_latent_video(class: &SceneClass, cfg: &WorldConfig, rng: &mut Rng) -> LatentVideo {
    let [t_lat, c, h, w] = cfg.latent_shape();
    let size = cfg.latent_size as f64;
    let weights = class.channel_weights(c);
    let mut data = vec![0.0; t_lat * c * h * w];
    let centre = (t_lat - 1) as f64 / 2.0;
    for _ in 0..class.blob_count {
        let p0 = (
            rng.uniform_in(0.2 * size, 0.7 * size),
            rng.uniform_in(0.2 * size, 0.7 * size),
        );
        let theta = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        let speed = class.speed * rng.uniform_in(0.75, 1.25);
        let amp = class.base_intensity * rng.uniform_in(0.8, 1.2);
        let sigma = rng.uniform_in(0.9, 1.4);
        let radius = rng.uniform_in(1.0, 2.0);
        for j in 0..t_lat {
            let tau = j as f64 - centre;
            let (py, px) = match class.motion {
                Motion::Linear => (p0.0 + speed * tau * theta.sin(), p0.1 + speed * tau * theta.cos()),
                Motion::Circular => {
                    let phi = theta + speed / radius * tau;
                    (p0.0 + radius * phi.sin(), p0.1 + radius * phi.cos())
                }
                Motion::Bounce => {
                    let (lo, hi) = (0.5, size - 1.5);
                    (
                        reflect(p0.0 + 1.5 * speed * tau * theta.sin(), lo, hi),
                        reflect(p0.1 + 1.5 * speed * tau * theta.cos(), lo, hi),
                    )
                }
            };
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - py).powi(2) + (x as f64 - px).powi(2);
                    let g = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    for (k, wk) in weights.iter().enumerate() {
                        data[((j * c + k) * h + y) * w + x] += wk * g;
                    }
                }
            }
        }
    }
    LatentVideo(Tensor::new(cfg.latent_shape().to_vec(), data).expect("latent shape"))
}

/// Peak per-pixel channel norm of latent frame `j`.
pub fn frame_energy(x: &LatentVideo, j: usize) -> f64 {
    let [_, c, h, w] = [x.0.shape()[0], x.0.shape()[1], x.0.shape()[2], x.0.shape()[3]];
    let f = x.frame(j);
    (0..h * w)
        .map(|p| (0..c).map(|k| f[k * h * w + p].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Fixed linear decoder: temporal interpolation between latent frames,
/// bilinear 2× spatial upsampling and a fixed channel mix.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: WorldConfig,
    mix: Vec<f64>,
    taps: Vec<(usize, usize, f64, f64)>,
}

impl Decoder {
    pub fn new(cfg: &WorldConfig) -> Self {
        let (cv, cl) = (cfg.video_channels, cfg.latent_channels);
        let mix = (0..cv * cl)
            .map(|i| {
                let (o, c) = (i / cl, i % cl);
                (0.9 * o as f64 + 1.7 * c as f64 + 0.3).cos() / (cl as f64).sqrt()
            })
            .collect();
        let hl = cfg.latent_size;
        let taps = (0..cfg.video_size)
            .map(|u| {
                let src = ((u as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (hl - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(hl - 1);
                let f = src - i0 as f64;
                (i0, i1, 1.0 - f, f)
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            mix,
            taps,
        }
    }

    /// Video frame from one latent frame (flattened `[C, H, W]`).
    fn decode_frame(&self, latent: &[f64], out: &mut [f64]) {
        let (cl, hl) = (self.cfg.latent_channels, self.cfg.latent_size);
        let (cv, hv) = (self.cfg.video_channels, self.cfg.video_size);
        // upsample each latent channel
        let mut up = vec![0.0; cl * hv * hv];
        for c in 0..cl {
            let src = &latent[c * hl * hl..(c + 1) * hl * hl];
            for (v, &(y0, y1, wy0, wy1)) in self.taps.iter().enumerate() {
                for (u, &(x0, x1, wx0, wx1)) in self.taps.iter().enumerate() {
                    up[(c * hv + v) * hv + u] = wy0 * (wx0 * src[y0 * hl + x0] + wx1 * src[y0 * hl + x1])
                        + wy1 * (wx0 * src[y1 * hl + x0] + wx1 * src[y1 * hl + x1]);
                }
            }
        }
        let plane = hv * hv;
        for o in 0..cv {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.iter_mut().for_each(|d| *d = 0.0);
            for c in 0..cl {
                let m = self.mix[o * cl + c];
                for (d, &s) in dst.iter_mut().zip(&up[c * plane..(c + 1) * plane]) {
                    *d += m * s;
                }
            }
        }
    }

    pub fn decode(&self, x: &LatentVideo) -> Result<DecodedVideo> {
        if x.0.shape() != self.cfg.latent_shape() {
            return Err(Error::Invalid(format!(
                "decode: expected latent {:?}, got {:?}",
                self.cfg.latent_shape(),
                x.0.shape()
            )));
        }
        let t_lat = self.cfg.latent_frames;
        let vshape = self.cfg.video_shape();
        let fsize: usize = vshape[1..].iter().product();
        let lsize = x.0.len() / t_lat;
        let mut data = vec![0.0; vshape[0] * fsize];
        self.decode_frame(x.frame(0), &mut data[..fsize]);
        let mut blend = vec![0.0; lsize];
        for j in 1..t_lat {
            let (prev, next) = (x.frame(j - 1), x.frame(j));
            for k in 1..=4 {
                let a = k as f64 / 4.0;
                for ((b, &p), &n) in blend.iter_mut().zip(prev).zip(next) {
                    *b = (1.0 - a) * p + a * n;
                }
                let idx = 4 * (j - 1) + k;
                self.decode_frame(&blend, &mut data[idx * fsize..(idx + 1) * fsize]);
            }
        }
        Ok(DecodedVideo(Tensor::new(vshape.to_vec(), data)?))
    }
}

/// Reference embeddings of one decoded clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEmbedding {
    /// `[n_image_v]`, unit norm.
    pub video: Tensor<f64>,
    /// `[T_lat, n_image_f]`, each row unit norm.
    pub frames: Tensor<f64>,
}

impl ReferenceEmbedding {
    /// Flat `[video ‖ frames]` layout used by `.emb` files.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let mut v = self.video.data().to_vec();
        v.extend_from_slice(self.frames.data());
        Tensor::from_vec(v)
    }

    pub fn from_tensor(t: &Tensor<f64>, cfg: &WorldConfig) -> Result<Self> {
        let (nv, nf, tl) = (cfg.embed_dim_video, cfg.embed_dim_frame, cfg.latent_frames);
        if t.len() != nv + tl * nf {
            return Err(Error::Invalid(format!("embedding file length {}", t.len())));
        }
        Ok(Self {
            video: Tensor::from_vec(t.data()[..nv].to_vec()),
            frames: Tensor::new(vec![tl, nf], t.data()[nv..].to_vec())?,
        })
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Two-layer random feature map: `normalize(W₂ tanh(W₁ x + b₁))`.
#[derive(Clone, Debug)]
struct RandomFeatures {
    w1: Tensor<f64>,
    b1: Vec<f64>,
    w2: Tensor<f64>,
}

impl RandomFeatures {
    fn new(rng: &mut Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: scaled_normal(rng, &[hidden, input], input, 5.0),
            b1: (0..hidden).map(|_| 0.3 * rng.normal()).collect(),
            w2: scaled_normal(rng, &[output, hidden], hidden, 1.0),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.b1.len())
            .map(|i| (dot(self.w1.row(i), x) + self.b1[i]).tanh())
            .collect();
        let out = (0..self.w2.shape()[0])
            .map(|o| dot(self.w2.row(o), &hidden))
            .collect();
        unit(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Frozen video- and frame-level encoders over decoded clips.
#[derive(Clone, Debug)]
pub struct ReferenceEmbedder {
    cfg: WorldConfig,
    video: RandomFeatures,
    frame: RandomFeatures,
}

impl ReferenceEmbedder {
    pub fn new(cfg: &WorldConfig, world_seed: u64) -> Self {
        let mut rng = Rng::new(world_seed).split(label_hash("reference-embedder"));
        let input = cfg.video_channels * cfg.video_size * cfg.video_size;
        Self {
            cfg: cfg.clone(),
            video: RandomFeatures::new(&mut rng, input, cfg.reference_hidden, cfg.embed_dim_video),
            frame: RandomFeatures::new(&mut rng, input, cfg.reference_hidden, cfg.embed_dim_frame),
        }
    }

    /// Frame-level embedding of each decoded frame, `[T_vid, n_image_f]`.
    pub fn embed_video_frames(&self, s: &DecodedVideo) -> Vec<Vec<f64>> {
        (0..s.frames()).map(|k| self.frame.apply(s.frame(k))).collect()
    }

    pub fn embed(&self, s: &DecodedVideo) -> ReferenceEmbedding {
        let t_vid = s.frames();
        let fsize = s.0.len() / t_vid;
        let mut pooled = vec![0.0; fsize];
        for k in 0..t_vid {
            for (p, &v) in pooled.iter_mut().zip(s.frame(k)) {
                *p += v / t_vid as f64;
            }
        }
        let video = Tensor::from_vec(self.video.apply(&pooled));

        let per_frame = self.embed_video_frames(s);
        let t_lat = (t_vid - 1) / 4 + 1;
        let nf = self.cfg.embed_dim_frame;
        let mut frames = Vec::with_capacity(t_lat * nf);
        frames.extend_from_slice(&per_frame[0]);
        for j in 1..t_lat {
            let mut acc = vec![0.0; nf];
            for e in &per_frame[4 * (j - 1) + 1..=4 * j] {
                acc.iter_mut().zip(e).for_each(|(a, &x)| *a += x / 4.0);
            }
            frames.extend(unit(acc));
        }
        ReferenceEmbedding {
            video,
            frames: Tensor::new(vec![t_lat, nf], frames).expect("frame embedding shape"),
        }
    }
}

/// Class prompt embeddings: class-mean reference embeddings, unit-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub video: Tensor<f64>,
    pub frame: Tensor<f64>,
}

impl PromptEmbedding {
    pub fn from_members(members: &[&ReferenceEmbedding]) -> Self {
        let nv = members[0].video.len();
        let nf = members[0].frames.shape()[1];
        let mut v = vec![0.0; nv];
        let mut f = vec![0.0; nf];
        for m in members {
            v.iter_mut().zip(m.video.data()).for_each(|(a, &x)| *a += x);
            for row in m.frames.data().chunks(nf) {
                f.iter_mut().zip(row).for_each(|(a, &x)| *a += x);
            }
        }
        Self {
            video: Tensor::from_vec(unit(v)),
            frame: Tensor::from_vec(unit(f)),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        let mut v = self.video.data().to_vec();
        v.extend_from_slice(self.frame.data());
        Tensor::from_vec(v)
    }

    pub fn from_tensor(t: &Tensor<f64>, cfg: &WorldConfig) -> Result<Self> {
        let nv = cfg.embed_dim_video;
        if t.len() != nv + cfg.embed_dim_frame {
            return Err(Error::Invalid(format!("prompt file length {}", t.len())));
        }
        Ok(Self {
            video: Tensor::from_vec(t.data()[..nv].to_vec()),
            frame: Tensor::from_vec(t.data()[nv..].to_vec()),
        })
    }
}

/// Everything fixed about the synthetic world for a given seed.
#[derive(Clone, Debug)]
pub struct World {
    pub cfg: WorldConfig,
    pub seed: u64,
    pub classes: Vec<SceneClass>,
    pub decoder: Decoder,
    pub reference: ReferenceEmbedder,
}

impl World {
    pub fn new(cfg: &WorldConfig, seed: u64) -> Self {
        Self {
            cfg: cfg.clone(),
            seed,
            classes: SceneClass::catalog(cfg.classes),
            decoder: Decoder::new(cfg),
            reference: ReferenceEmbedder::new(cfg, seed),
        }
    }

    pub fn embed_latent(&self, x: &LatentVideo) -> Result<ReferenceEmbedding> {
        Ok(self.reference.embed(&self.decoder.decode(x)?))
    }

    fn sample_rng(&self, split: Split, class: usize, index: usize) -> Rng {
        Rng::new(self.seed)
            .split(label_hash("dataset"))
            .split(split as u64)
            .split(class as u64)
            .split(index as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 0,
    Test = 1,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub format: String,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub train_total: usize,
    pub test_total: usize,
    pub latent_shape: Vec<usize>,
    pub video_shape: Vec<usize>,
    pub embed_dim_video: usize,
    pub embed_dim_frame: usize,
    pub world: WorldConfig,
    pub classes: Vec<SceneClass>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub class: usize,
    pub latent: LatentVideo,
    pub embedding: ReferenceEmbedding,
}

/// A dataset loaded from disk (decoded videos stay on disk).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub prompts: Vec<PromptEmbedding>,
}

fn write_file(path: &Path, t: &Tensor<f64>) -> Result<()> {
    save_tensor(path, t).map_err(|e| Error::core_at(path, e))
}

fn read_file(path: &Path) -> Result<Tensor<f64>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(load_tensor(path)?)
}

pub fn sample_path(dir: &Path, split: Split, class: usize, index: usize, ext: &str) -> PathBuf {
    dir.join(split.name())
        .join(class.to_string())
        .join(format!("{index}.{ext}"))
}

pub fn prompt_path(dir: &Path, class: usize) -> PathBuf {
    dir.join("prompts").join(format!("{class}.emb"))
}

/// Generates and persists the full dataset under `dir`.
pub fn build_dataset(cfg: &WorldConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let world = World::new(cfg, seed);
    let mut class_members: Vec<Vec<ReferenceEmbedding>> = vec![Vec::new(); cfg.classes];
    for (split, count) in [(Split::Train, cfg.train_per_class), (Split::Test, cfg.test_per_class)] {
        for class in &world.classes {
            let cdir = dir.join(split.name()).join(class.id.to_string());
            fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            for i in 0..count {
                let mut rng = world.sample_rng(split, class.id, i);
                let x = synth_latent_video(class, cfg, &mut rng);
                let s = world.decoder.decode(&x)?;
                let e = world.reference.embed(&s);
                write_file(&sample_path(dir, split, class.id, i, "lat"), &x.0)?;
                write_file(&sample_path(dir, split, class.id, i, "vid"), &s.0)?;
                write_file(&sample_path(dir, split, class.id, i, "emb"), &e.to_tensor())?;
                if split == Split::Train {
                    class_members[class.id].push(e);
                }
            }
        }
    }
    let pdir = dir.join("prompts");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    for (c, members) in class_members.iter().enumerate() {
        let refs: Vec<&ReferenceEmbedding> = members.iter().collect();
        let p = PromptEmbedding::from_members(&refs);
        write_file(&prompt_path(dir, c), &p.to_tensor())?;
    }
    let manifest = DatasetManifest {
        seed,
        format: "DFL1".into(),
        train_per_class: cfg.train_per_class,
        test_per_class: cfg.test_per_class,
        train_total: cfg.train_per_class * cfg.classes,
        test_total: cfg.test_per_class * cfg.classes,
        latent_shape: cfg.latent_shape().to_vec(),
        video_shape: cfg.video_shape().to_vec(),
        embed_dim_video: cfg.embed_dim_video,
        embed_dim_frame: cfg.embed_dim_frame,
        world: cfg.clone(),
        classes: world.classes.clone(),
    };
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::Missing(mpath));
        }
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let cfg = &manifest.world;
        let load_split = |split: Split, count: usize| -> Result<Vec<Sample>> {
            let mut out = Vec::with_capacity(count * cfg.classes);
            for class in 0..cfg.classes {
                for i in 0..count {
                    let latent = LatentVideo::new(read_file(&sample_path(dir, split, class, i, "lat"))?)?;
                    let emb = read_file(&sample_path(dir, split, class, i, "emb"))?;
                    out.push(Sample {
                        class,
                        latent,
                        embedding: ReferenceEmbedding::from_tensor(&emb, cfg)?,
                    });
                }
            }
            Ok(out)
        };
        let train = load_split(Split::Train, manifest.train_per_class)?;
        let test = load_split(Split::Test, manifest.test_per_class)?;
        let prompts = (0..cfg.classes)
            .map(|c| PromptEmbedding::from_tensor(&read_file(&prompt_path(dir, c))?, cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            manifest,
            train,
            test,
            prompts,
        })
    }

    pub fn world(&self) -> World {
        World::new(&self.manifest.world, self.manifest.seed)
    }
}
