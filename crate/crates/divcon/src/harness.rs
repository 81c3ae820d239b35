//! End-to-end pipeline: data, flow, latent models, joint sampling and reports.
//!
//! Every stage records a key hashed from its configuration and upstream keys;
//! a stage whose key and artifacts are already present is skipped.

use std::fs;
use std::path::{Path, PathBuf};

use divcon_core::io::{load_tensor, save_tensor};
use divcon_core::rng::{label_hash, mix_seed};
use divcon_core::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, read_json, write_json, write_text};
use crate::config::{ExperimentConfig, Method, Variant};
use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowDims, VelocityField};
use crate::latent::{
    eval_csv, eval_latent_models, train_embedders, train_interpolator, EmbedderDims, EvalRow, InterpolatorDims,
    LatentEmbedder, LatentInterpolator, TrajectoryBank,
};
use crate::metrics::{consistency_mse, summarize, vendi_score, Summary};
use crate::sampler::{joint_sample, GuidanceModels, TRACE_HEADER};
use crate::world::{build_dataset, Dataset, LatentVideo, World};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn key_of<T: Serialize>(parts: &T) -> String {
    sha256_hex(serde_json::to_string(parts).expect("key parts serialize").as_bytes())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    key: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub key: String,
    pub skipped: bool,
}

/// Seed of the initial noise of batch `(class, rep)`; shared by every method.
pub fn noise_seed(master: u64, class: usize, rep: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(master, label_hash("noise")), class as u64), rep as u64)
}

/// Recorded run seed `hash(master, method, class, rep)`.
pub fn run_seed(master: u64, method: &str, class: usize, rep: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(master, label_hash(method)), class as u64), rep as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub dims: FlowDims,
    pub config: crate::config::FlowConfig,
    pub final_loss: f64,
    pub diverged_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderMeta {
    pub dims: EmbedderDims,
    pub target_sparsity: f64,
    pub sparsity: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolatorMeta {
    pub dims: InterpolatorDims,
    pub mu: f64,
    pub epochs: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub class: usize,
    pub rep: usize,
    pub run_seed: u64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub variants: Vec<Variant>,
    pub checkpoints: Vec<(String, String)>,
    pub runs: Vec<RunRecord>,
}

/// Aggregated metrics of one sampling variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub name: String,
    pub method: Method,
    pub use_video_term: bool,
    pub use_consistency_regulation: bool,
    pub vendi_v: Summary,
    pub vendi_f: Summary,
    pub vendi_v_normalized: Summary,
    pub vendi_f_normalized: Summary,
    pub mse: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Temporal interpolation oracle used for the consistency error.
    pub oracle: String,
    pub notes: Vec<String>,
    pub rows: Vec<MethodRow>,
}

impl MetricReport {
    pub fn row(&self, name: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Table 1 rows in display order, with their row labels.
pub const TABLE1: [(&str, &str); 4] = [
    ("iid", "IID"),
    ("dpp", "DPP (approximates DiverseFlow)"),
    ("particle_guidance", "Particle Guidance"),
    ("ours", "Ours"),
];

/// Table 2 cells: (Diversity-v, ConsisReg, variant).
pub const TABLE2: [(bool, bool, &str); 4] = [
    (false, false, "ours_nov_noreg"),
    (false, true, "ours_nov_reg"),
    (true, false, "dpp"),
    (true, true, "ours"),
];

fn fmt_summary(s: &Summary) -> String {
    match s.ci95 {
        Some(ci) => format!("{:.6},{:.6}", s.mean, ci),
        None => format!("{:.6},n/a", s.mean),
    }
}

const METRIC_HEADER: &str = "vendi_v,vendi_v_ci95,vendi_f,vendi_f_ci95,mse,mse_ci95,vendi_v_norm,vendi_v_norm_ci95,vendi_f_norm,vendi_f_norm_ci95";

fn metric_cells(r: &MethodRow) -> String {
    [&r.vendi_v, &r.vendi_f, &r.mse, &r.vendi_v_normalized, &r.vendi_f_normalized]
        .iter()
        .map(|s| fmt_summary(s))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn table1_csv(report: &MetricReport) -> String {
    let mut s = format!("method,{METRIC_HEADER}\n");
    for (name, label) in TABLE1 {
        if let Some(r) = report.row(name) {
            s.push_str(&format!("{label},{}\n", metric_cells(r)));
        }
    }
    s
}

pub fn table2_csv(report: &MetricReport) -> String {
    let mut s = format!("diversity_v,consis_reg,{METRIC_HEADER}\n");
    for (video, reg, name) in TABLE2 {
        if let Some(r) = report.row(name) {
            s.push_str(&format!("{},{},{}\n", on_off(video), on_off(reg), metric_cells(r)));
        }
    }
    s
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Stage runner rooted at an output directory.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            out: out.into(),
            verbose: false,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn flow_path(&self) -> PathBuf {
        self.out.join("flow").join("flow.params")
    }

    pub fn latent_dir(&self) -> PathBuf {
        self.out.join("latent")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    fn data_key(&self) -> String {
        key_of(&("data", &self.cfg.world, self.cfg.seed))
    }

    fn flow_key(&self) -> String {
        key_of(&("flow", self.data_key(), &self.cfg.flow, self.cfg.seed))
    }

    fn latent_key(&self) -> String {
        key_of(&("latent", self.flow_key(), &self.cfg.latent, self.cfg.sampler.steps, self.cfg.seed))
    }

    fn runs_key(&self) -> String {
        key_of(&("runs", self.latent_key(), &self.cfg.guidance, &self.cfg.sampler, self.cfg.variants()))
    }

    fn is_current(&self, dir: &Path, key: &str, artifacts: &[PathBuf]) -> bool {
        let Ok(rec) = read_json::<StageRecord>(&dir.join("stage.json")) else {
            return false;
        };
        rec.key == key && artifacts.iter().all(|p| p.exists())
    }

    fn mark(&self, dir: &Path, stage: &str, key: &str) -> Result<()> {
        write_json(
            &dir.join("stage.json"),
            &StageRecord {
                stage: stage.into(),
                key: key.into(),
            },
        )
    }

    fn run_stage(
        &self,
        stage: &'static str,
        dir: &Path,
        key: String,
        artifacts: &[PathBuf],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<StageOutcome> {
        if self.is_current(dir, &key, artifacts) {
            self.log(format!("[{stage}] up to date"));
            return Ok(StageOutcome {
                stage,
                key,
                skipped: true,
            });
        }
        self.log(format!("[{stage}] running"));
        // a stale record must not survive a failed rebuild
        let _ = fs::remove_file(dir.join("stage.json"));
        body().map_err(|e| e.in_stage(stage))?;
        self.mark(dir, stage, &key).map_err(|e| e.in_stage(stage))?;
        Ok(StageOutcome {
            stage,
            key,
            skipped: false,
        })
    }

    pub fn gen_data(&self) -> Result<StageOutcome> {
        let dir = self.data_dir();
        self.run_stage("gen-data", &dir, self.data_key(), &[dir.join("manifest.json")], || {
            build_dataset(&self.cfg.world, self.cfg.seed, &dir).map(|_| ())
        })
    }

    pub fn load_data(&self) -> Result<Dataset> {
        Dataset::load(&self.data_dir())
    }

    pub fn train_flow(&self) -> Result<StageOutcome> {
        let path = self.flow_path();
        let dir = path.parent().expect("flow dir").to_path_buf();
        self.run_stage("train-flow", &dir, self.flow_key(), std::slice::from_ref(&path), || {
            let data = self.load_data()?;
            let run = train_flow(&data, &self.cfg.flow, self.cfg.seed)?;
            let meta = FlowMeta {
                dims: run.model.dims.clone(),
                config: self.cfg.flow.clone(),
                final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
                diverged_at: run.diverged_at,
            };
            checkpoint::save(&path, &run.model.params, &meta)?;
            let mut curve = String::from("step,loss\n");
            for (i, l) in run.losses.iter().enumerate() {
                curve.push_str(&format!("{i},{l:.10e}\n"));
            }
            write_text(&dir.join("loss.csv"), &curve)?;
            match run.diverged_at {
                Some(step) => Err(Error::NonFinite {
                    step,
                    what: "flow loss (last finite checkpoint saved)".into(),
                }),
                None => Ok(()),
            }
        })
    }

    pub fn load_flow(&self) -> Result<VelocityField> {
        let (params, meta): (_, FlowMeta) = checkpoint::load(&self.flow_path())?;
        Ok(VelocityField { dims: meta.dims, params })
    }

    fn banks(&self, world: &World, flow: &VelocityField) -> Result<(TrajectoryBank, TrajectoryBank)> {
        let steps = self.cfg.sampler.steps;
        let root = mix_seed(self.cfg.seed, label_hash("trajectory-bank"));
        let train = TrajectoryBank::generate(world, flow, self.cfg.world.train_per_class, steps, mix_seed(root, 0))?;
        let test = TrajectoryBank::generate(world, flow, self.cfg.world.test_per_class, steps, mix_seed(root, 1))?;
        Ok((train, test))
    }

    fn latent_paths(&self) -> [PathBuf; 3] {
        let d = self.latent_dir();
        [d.join("video.params"), d.join("frame.params"), d.join("interp.params")]
    }

    pub fn train_latent(&self) -> Result<StageOutcome> {
        let dir = self.latent_dir();
        let paths = self.latent_paths();
        let mut artifacts = paths.to_vec();
        artifacts.push(dir.join("eval.csv"));
        self.run_stage("train-latent", &dir, self.latent_key(), &artifacts, || {
            let data = self.load_data()?;
            let world = data.world();
            let flow = self.load_flow()?;
            let (train, test) = self.banks(&world, &flow)?;
            self.log("[train-latent] trajectory banks ready");
            let emb = train_embedders(&train, &data.prompts, &self.cfg.world, &self.cfg.latent, self.cfg.seed)?;
            self.log("[train-latent] embedders trained");
            let interp = train_interpolator(&train, &self.cfg.world, &self.cfg.latent, self.cfg.seed)?;
            self.log("[train-latent] interpolator trained");
            let last = emb.history.last().cloned().unwrap_or_default();
            for (model, path, loss) in [(&emb.video, &paths[0], last.1.total), (&emb.frame, &paths[1], last.2.total)] {
                let meta = EmbedderMeta {
                    dims: model.dims.clone(),
                    target_sparsity: self.cfg.latent.target_sparsity,
                    sparsity: model.sparsity(),
                    final_loss: loss,
                };
                checkpoint::save(path, &model.to_store(), &meta)?;
            }
            let meta = InterpolatorMeta {
                dims: interp.model.dims.clone(),
                mu: self.cfg.latent.interp_mu,
                epochs: self.cfg.latent.interp_epochs,
                final_loss: interp.losses.last().copied().unwrap_or(f64::NAN),
            };
            checkpoint::save(&paths[2], &interp.model.params, &meta)?;

            let mut hist = String::from("step,stage,video_similarity,video_pairing,video_reg_mean,video_reg_proj,video_total,frame_similarity,frame_pairing,frame_reg_mean,frame_reg_proj,frame_total\n");
            for (i, (stage, v, f)) in emb.history.iter().enumerate() {
                hist.push_str(&format!(
                    "{i},{stage},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
                    v.similarity, v.pairing, v.reg_mean, v.reg_proj, v.total, f.similarity, f.pairing, f.reg_mean, f.reg_proj, f.total
                ));
            }
            write_text(&dir.join("embedder_losses.csv"), &hist)?;
            let mut il = String::from("epoch,loss\n");
            for (i, l) in interp.losses.iter().enumerate() {
                il.push_str(&format!("{i},{l:.10e}\n"));
            }
            write_text(&dir.join("interp_losses.csv"), &il)?;
            let rows = eval_latent_models(&emb.video, &emb.frame, &interp.model, &test, &data.prompts, &self.cfg.latent.eval_steps)?;
            write_text(&dir.join("eval.csv"), &eval_csv(&rows))?;
            write_json(&dir.join("eval.json"), &rows)
        })
    }

    pub fn load_latent_eval(&self) -> Result<Vec<EvalRow>> {
        read_json(&self.latent_dir().join("eval.json"))
    }

    pub fn load_guidance_models(&self, data: &Dataset) -> Result<GuidanceModels> {
        let [vp, fp, ip] = self.latent_paths();
        let (vs, vm): (_, EmbedderMeta) = checkpoint::load(&vp)?;
        let (fs_, fm): (_, EmbedderMeta) = checkpoint::load(&fp)?;
        let (is, im): (_, InterpolatorMeta) = checkpoint::load(&ip)?;
        Ok(GuidanceModels {
            video: LatentEmbedder::from_store(vm.dims, vs)?,
            frame: LatentEmbedder::from_store(fm.dims, fs_)?,
            interp: LatentInterpolator {
                dims: im.dims,
                params: is,
            },
            prompts: data.prompts.clone(),
        })
    }

    pub fn run_dir(&self, variant: &str, class: usize, rep: usize) -> PathBuf {
        self.runs_dir().join(variant).join(class.to_string()).join(rep.to_string())
    }

    /// Generates every (variant, class, repetition) batch.
    pub fn sample(&self) -> Result<StageOutcome> {
        let dir = self.runs_dir();
        self.run_stage("sample", &dir, self.runs_key(), &[dir.join("manifest.json")], || {
            let data = self.load_data()?;
            let flow = self.load_flow()?;
            let models = self.load_guidance_models(&data)?;
            let variants = self.cfg.variants();
            let s = &self.cfg.sampler;
            let mut runs = Vec::new();
            for variant in &variants {
                self.log(format!("[sample] {}", variant.name));
                for class in 0..self.cfg.world.classes {
                    for rep in 0..s.repetitions {
                        let ns = noise_seed(self.cfg.seed, class, rep);
                        let out = joint_sample(&flow, Some(&models), &variant.guidance, s.n, s.steps, class, &Rng::new(ns))?;
                        let rd = self.run_dir(&variant.name, class, rep);
                        fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
                        for (i, x) in out.samples.iter().enumerate() {
                            let p = rd.join(format!("sample_{i}.lat"));
                            save_tensor(&p, x.tensor()).map_err(|e| Error::core_at(&p, e))?;
                        }
                        let mut trace = String::from(TRACE_HEADER);
                        trace.push('\n');
                        for row in &out.trace {
                            trace.push_str(&row.csv());
                            trace.push('\n');
                        }
                        write_text(&rd.join("trace.csv"), &trace)?;
                        runs.push(RunRecord {
                            variant: variant.name.clone(),
                            class,
                            rep,
                            run_seed: run_seed(self.cfg.seed, &variant.name, class, rep),
                            noise_seed: ns,
                        });
                    }
                }
            }
            let [vp, fp, ip] = self.latent_paths();
            let mut checkpoints = Vec::new();
            for p in [self.flow_path(), vp, fp, ip] {
                let name = p.file_name().expect("file name").to_string_lossy().into_owned();
                checkpoints.push((name, file_hash(&p)?));
            }
            write_json(
                &dir.join("manifest.json"),
                &RunManifest {
                    config: self.cfg.clone(),
                    variants,
                    checkpoints,
                    runs,
                },
            )
        })
    }

    /// Loads the samples of one run.
    pub fn load_run(&self, variant: &str, class: usize, rep: usize) -> Result<Vec<LatentVideo>> {
        let rd = self.run_dir(variant, class, rep);
        (0..self.cfg.sampler.n)
            .map(|i| {
                let p = rd.join(format!("sample_{i}.lat"));
                if !p.exists() {
                    return Err(Error::Missing(p));
                }
                LatentVideo::new(load_tensor(&p).map_err(|e| Error::core_at(&p, e))?)
            })
            .collect()
    }

    /// Metrics of every variant, aggregated per repetition over classes.
    pub fn evaluate(&self) -> Result<MetricReport> {
        let run = || -> Result<MetricReport> {
            let world = World::new(&self.cfg.world, self.cfg.seed);
            let missing: Vec<String> = self
                .cfg
                .variants()
                .iter()
                .filter(|v| !self.runs_dir().join(&v.name).exists())
                .map(|v| v.name.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Invalid(format!("missing runs: {}", missing.join(", "))));
            }
            let t_lat = self.cfg.world.latent_frames;
            let mut rows = Vec::new();
            for variant in self.cfg.variants() {
                let reps = self.cfg.sampler.repetitions;
                let mut cols: [Vec<f64>; 5] = Default::default();
                for rep in 0..reps {
                    let mut acc = [0.0; 5];
                    for class in 0..self.cfg.world.classes {
                        let samples = self.load_run(&variant.name, class, rep)?;
                        let mut embs = Vec::with_capacity(samples.len());
                        let mut mse = 0.0;
                        for x in &samples {
                            let s = world.decoder.decode(x)?;
                            mse += consistency_mse(&s)?;
                            embs.push(world.reference.embed(&s));
                        }
                        let ev: Vec<&[f64]> = embs.iter().map(|e| e.video.data()).collect();
                        let vv = vendi_score(&ev)?;
                        let (mut vf, mut vfn) = (0.0, 0.0);
                        for j in 0..t_lat {
                            let ef: Vec<&[f64]> = embs.iter().map(|e| e.frames.row(j)).collect();
                            let v = vendi_score(&ef)?;
                            vf += v.raw / t_lat as f64;
                            vfn += v.normalized / t_lat as f64;
                        }
                        let per = [vv.raw, vf, mse / samples.len() as f64, vv.normalized, vfn];
                        acc.iter_mut().zip(per).for_each(|(a, p)| *a += p);
                    }
                    let classes = self.cfg.world.classes as f64;
                    for (c, a) in cols.iter_mut().zip(acc) {
                        c.push(a / classes);
                    }
                }
                let [vv, vf, mse, vvn, vfn] = cols;
                rows.push(MethodRow {
                    name: variant.name.clone(),
                    method: variant.guidance.method,
                    use_video_term: variant.guidance.use_video_term,
                    use_consistency_regulation: variant.guidance.use_consistency_regulation,
                    vendi_v: summarize(vv),
                    vendi_f: summarize(vf),
                    vendi_v_normalized: summarize(vvn),
                    vendi_f_normalized: summarize(vfn),
                    mse: summarize(mse),
                });
            }
            let report = MetricReport {
                oracle: "cubic".into(),
                notes: vec![
                    "dpp row approximates DiverseFlow".into(),
                    "vendi values are raw; *_normalized divide by batch size".into(),
                    "ci95 is a Student-t half-width over repetitions".into(),
                ],
                rows,
            };
            let dir = self.reports_dir();
            write_json(&dir.join("report.json"), &report)?;
            write_text(&dir.join("table1.csv"), &table1_csv(&report))?;
            write_text(&dir.join("table2.csv"), &table2_csv(&report))?;
            Ok(report)
        };
        run().map_err(|e| e.in_stage("evaluate"))
    }

    pub fn load_report(&self) -> Result<MetricReport> {
        read_json(&self.reports_dir().join("report.json"))
    }

    /// All stages in order.
    pub fn run_experiment(&self) -> Result<(Vec<StageOutcome>, MetricReport)> {
        let stages = vec![self.gen_data()?, self.train_flow()?, self.train_latent()?, self.sample()?];
        let report = self.evaluate()?;
        Ok((stages, report))
    }
}
