//! Experiment configuration, one TOML document with a section per stage.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Number of scene classes (the prompt set).
    pub classes: usize,
    pub latent_frames: usize,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub video_channels: usize,
    /// Decoded spatial size; must be twice `latent_size`.
    pub video_size: usize,
    pub embed_dim_video: usize,
    pub embed_dim_frame: usize,
    pub reference_hidden: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            latent_frames: 5,
            latent_channels: 2,
            latent_size: 8,
            video_channels: 3,
            video_size: 16,
            embed_dim_video: 16,
            embed_dim_frame: 16,
            reference_hidden: 32,
            train_per_class: 100,
            test_per_class: 20,
        }
    }
}

impl WorldConfig {
    pub fn latent_shape(&self) -> [usize; 4] {
        [
            self.latent_frames,
            self.latent_channels,
            self.latent_size,
            self.latent_size,
        ]
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn video_frames(&self) -> usize {
        4 * (self.latent_frames - 1) + 1
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [
            self.video_frames(),
            self.video_channels,
            self.video_size,
            self.video_size,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("class and sample counts must be ≥ 1");
        }
        if self.latent_frames < 3 {
            return bad("latent_frames must be ≥ 3");
        }
        if self.video_size != 2 * self.latent_size {
            return bad("video_size must be 2 × latent_size");
        }
        if self.latent_channels == 0 || self.video_channels == 0 || self.latent_size == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            steps: 6000,
            batch_size: 64,
            learning_rate: 3e-3,
            momentum: 0.9,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("flow: counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("flow: learning_rate > 0, momentum in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub embed_dim: usize,
    pub conv_channels: usize,
    /// Steps per stage (early, middle, late).
    pub stage_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_s: f64,
    pub target_sparsity: f64,
    pub sparsify_every: usize,
    pub interp_channels: usize,
    pub interp_epochs: usize,
    /// Trajectories drawn per interpolator epoch.
    pub interp_epoch_size: usize,
    pub interp_batch: usize,
    pub interp_learning_rate: f64,
    /// Weight of the pull towards linear interpolation.
    pub interp_mu: f64,
    /// Flow steps (out of the sampler's step count) at which models are evaluated.
    pub eval_steps: Vec<usize>,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            conv_channels: 8,
            stage_steps: 4000,
            batch_size: 16,
            learning_rate: 1e-3,
            lambda_s: 10.0,
            target_sparsity: 0.8,
            sparsify_every: 200,
            interp_channels: 8,
            interp_epochs: 1000,
            interp_epoch_size: 128,
            interp_batch: 32,
            interp_learning_rate: 1e-3,
            interp_mu: 0.1,
            eval_steps: vec![10, 20, 30, 40, 50],
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("latent: batch_size must be ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::Config("latent: target_sparsity in [0,1)".into()));
        }
        if self.sparsify_every == 0 || self.embed_dim == 0 || self.conv_channels == 0 {
            return Err(Error::Config("latent: counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Dpp,
    ParticleGuidance,
    Ours,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Dpp => "dpp",
            Method::ParticleGuidance => "particle_guidance",
            Method::Ours => "ours",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub method: Method,
    /// Include the video-level term in the difference matrix.
    pub use_video_term: bool,
    /// Regulate the diversity gradient with the consistency gradient.
    pub use_consistency_regulation: bool,
    pub gamma: f64,
    pub jitter: f64,
    pub stop_gradient_through_velocity: bool,
    /// Guidance is applied only while `t < t_max`.
    pub t_max: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            use_video_term: true,
            use_consistency_regulation: true,
            gamma: 1.0,
            jitter: 1e-3,
            stop_gradient_through_velocity: true,
            t_max: 1.0,
        }
    }
}

impl GuidanceConfig {
    pub fn iid() -> Self {
        Self {
            method: Method::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("guidance: gamma must be ≥ 0".into()));
        }
        if !(self.jitter > 0.0) {
            return Err(Error::Config("guidance: jitter must be > 0".into()));
        }
        Ok(())
    }

    /// Regulation only exists for the full method.
    pub fn regulates(&self) -> bool {
        self.method == Method::Ours && self.use_consistency_regulation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Videos generated jointly per batch.
    pub n: usize,
    pub steps: usize,
    pub repetitions: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n: 4,
            steps: 50,
            repetitions: 20,
        }
    }
}

/// One named sampling configuration in the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(flatten)]
    pub guidance: GuidanceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub flow: FlowConfig,
    pub latent: LatentConfig,
    /// Shared guidance settings; each variant overrides method and ablation flags.
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20240,
            world: WorldConfig::default(),
            flow: FlowConfig::default(),
            latent: LatentConfig::default(),
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.flow.validate()?;
        self.latent.validate()?;
        self.guidance.validate()?;
        if self.sampler.steps == 0 || self.sampler.repetitions == 0 || self.sampler.n == 0 {
            return Err(Error::Config("sampler: counts must be positive".into()));
        }
        if self
            .latent
            .eval_steps
            .iter()
            .any(|&s| s > self.sampler.steps)
        {
            return Err(Error::Config("latent.eval_steps exceed sampler.steps".into()));
        }
        Ok(())
    }

    /// Table 1 rows followed by the two extra Table 2 ablation cells.
    ///
    /// The (Diversity-v on, ConsisReg off) cell is the `dpp` row and the
    /// (on, on) cell is `ours`, so they are not repeated.
    pub fn variants(&self) -> Vec<Variant> {
        let base = &self.guidance;
        let v = |name: &str, method, video, reg| Variant {
            name: name.to_owned(),
            guidance: GuidanceConfig {
                method,
                use_video_term: video,
                use_consistency_regulation: reg,
                ..base.clone()
            },
        };
        vec![
            v("iid", Method::None, true, false),
            v("dpp", Method::Dpp, true, false),
            v("particle_guidance", Method::ParticleGuidance, true, false),
            v("ours", Method::Ours, true, true),
            v("ours_nov_noreg", Method::Ours, false, false),
            v("ours_nov_reg", Method::Ours, false, true),
        ]
    }
}
