//! Run configuration. Every struct deserializes with defaults for omitted
//! fields, so the resolved form of any input is `serde_json::to_string` of
//! the parsed value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{GridConfig, Theme};
use crate::error::{Error, Result};
use crate::nn::{ArchConfig, OptimConfig};
use crate::policy_eval::Estimator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaConfig {
    /// Critic ascent steps per source-encoder descent step.
    pub n_critic: usize,
    pub gp_coeff: f64,
    pub batch_size: usize,
    /// Multiplier on the optimizer learning rate for the critic.
    pub lr_scale: f64,
    /// Multiplier on the optimizer learning rate for the source encoder.
    pub generator_lr_scale: f64,
    /// Source-encoder steps per training iteration.
    pub generator_steps: usize,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            n_critic: 5,
            gp_coeff: 10.0,
            batch_size: 64,
            lr_scale: 1.0,
            generator_lr_scale: 0.01,
            generator_steps: 25,
        }
    }
}

impl DaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_critic == 0 || self.batch_size == 0 || self.generator_steps == 0 {
            return Err(Error::Config("DAConfig counts must be positive".into()));
        }
        if !(self.gp_coeff >= 0.0) || !(self.lr_scale > 0.0) || !(self.generator_lr_scale > 0.0) {
            return Err(Error::Config(
                "DAConfig.gp_coeff must be >= 0 and both lr scales > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AwpoConfig {
    /// Temperature λ of the exponentiated advantage weights.
    pub temperature: f64,
    pub weight_cap: f64,
    /// Environment transitions collected per iteration (N).
    pub rollout_len: usize,
    pub minibatch: usize,
    pub policy_updates: usize,
    pub critic_updates: usize,
    /// Learning-rate multiplier for enc_S in critic updates. The inverse
    /// models are only ever fitted on enc_T, so an enc_S that moves at the
    /// full rate quickly stops producing usable action labels.
    pub source_encoder_lr_scale: f64,
    pub inverse_updates: usize,
    pub standardize_advantages: bool,
    pub estimator: Estimator,
    pub lambda_gae: f64,
    pub lambda_pql: f64,
    /// Polyak rate of the bootstrap Q network.
    pub tau: f64,
    pub buffer_capacity: usize,
    pub use_source: bool,
    pub use_da: bool,
    /// Bonus r_i added to every estimated source reward.
    pub reward_bonus: f64,
}

impl Default for AwpoConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            weight_cap: 20.0,
            rollout_len: 2048,
            minibatch: 256,
            policy_updates: 50,
            critic_updates: 50,
            source_encoder_lr_scale: 1.0,
            inverse_updates: 25,
            standardize_advantages: false,
            estimator: Estimator::Gae,
            lambda_gae: 0.95,
            lambda_pql: 0.7,
            tau: 0.005,
            buffer_capacity: 50_000,
            use_source: false,
            use_da: false,
            reward_bonus: 0.01,
        }
    }
}

impl AwpoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("AWPOConfig.{m}")));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(&format!("λ > 0 required (temperature = {})", self.temperature));
        }
        if !(self.weight_cap >= 1.0) {
            return fail("weight_cap must be >= 1");
        }
        if self.rollout_len == 0 || self.minibatch == 0 {
            return fail("rollout_len and minibatch must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) || !(0.0..=1.0).contains(&self.lambda_pql) {
            return fail("lambda_gae and lambda_pql must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail("tau must lie in (0, 1]");
        }
        if self.buffer_capacity < self.rollout_len {
            return fail("buffer_capacity must hold at least one rollout");
        }
        if !(self.source_encoder_lr_scale >= 0.0 && self.source_encoder_lr_scale.is_finite()) {
            return fail("source_encoder_lr_scale must be finite and >= 0");
        }
        if !(self.reward_bonus >= 0.0) {
            return fail("reward_bonus must be >= 0");
        }
        if self.use_da && !self.use_source {
            return fail("use_da requires use_source");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// OBSD file written by `generate-dataset` and read by `train`.
    pub path: Option<PathBuf>,
    /// Directory of numbered frames used instead of `path`.
    pub external_frames: Option<PathBuf>,
    pub num_frames: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Rollout length for external footage, which has no episode marks.
    pub chunk_len: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            external_frames: None,
            num_frames: 5000,
            epsilon: 0.1,
            seed: 0,
            chunk_len: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: GridConfig,
    /// Environment rendered into the source video.
    pub source_env: Option<GridConfig>,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub awpo: AwpoConfig,
    pub optim: OptimConfig,
    pub da: DaConfig,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Iterations between checkpoints; the final iteration always writes one.
    pub checkpoint_interval: usize,
    /// Fill the `wall_seconds` column; off keeps metric files reproducible.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: GridConfig::default(),
            source_env: Some(GridConfig::default().with_theme(Theme::SourceVariant)),
            dataset: DatasetConfig::default(),
            arch: ArchConfig::default(),
            awpo: AwpoConfig::default(),
            optim: OptimConfig::default(),
            da: DaConfig::default(),
            eval_interval: 2000,
            eval_episodes: 10,
            total_steps: 100_000,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_interval: 10,
            log_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.env.theme != Theme::Target {
            return Err(Error::Config("env.theme must be Target".into()));
        }
        if let Some(src) = &self.source_env {
            src.validate()?;
            if !src.theme.is_source() {
                return Err(Error::Config("source_env.theme must be a source theme".into()));
            }
        }
        self.arch.validate()?;
        if (self.arch.obs_height, self.arch.obs_width) != (self.env.obs_height, self.env.obs_width) {
            return Err(Error::Config(format!(
                "arch expects {}x{} observations, env renders {}x{}",
                self.arch.obs_height, self.arch.obs_width, self.env.obs_height, self.env.obs_width
            )));
        }
        self.awpo.validate()?;
        self.optim.validate()?;
        self.da.validate()?;
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.epsilon) {
            return Err(Error::Config("dataset.epsilon must lie in [0, 1]".into()));
        }
        if self.dataset.chunk_len < 2 {
            return Err(Error::Config("dataset.chunk_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with every field materialized.
    pub fn resolved_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Iterations needed to consume `total_steps` in chunks of `rollout_len`.
    pub fn iterations(&self) -> usize {
        self.total_steps.div_ceil(self.awpo.rollout_len)
    }
}
