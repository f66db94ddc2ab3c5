//! Run configuration. Every field has a default so a config file only needs
//! to name what it overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_agents: usize,
    pub num_consumers: usize,
    pub num_resources: usize,
    /// Spatial dimension, 2 or 3.
    pub dim: usize,
    /// Communication radius C.
    pub comm_radius: f64,
    /// Interaction radius R_m shared by all consumers.
    pub consumer_radius: f64,
    /// Lower and upper corner of the cubic environment, per axis.
    pub bounds: [f64; 2],
    pub max_speed: f64,
    pub dt: f64,
    pub episode_steps: usize,
    pub demand_range: [f64; 2],
    pub supply_range: [f64; 2],
    /// Probability that a resource index is persistent rather than instantaneous.
    pub persistent_prob: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_agents: 10,
            num_consumers: 4,
            num_resources: 2,
            dim: 2,
            comm_radius: 1.0,
            consumer_radius: 0.25,
            bounds: [-1.0, 1.0],
            max_speed: 1.0,
            dt: 0.05,
            episode_steps: 128,
            demand_range: [0.5, 1.5],
            supply_range: [0.5, 1.5],
            persistent_prob: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_consumers == 0 {
            return fail("at least one consumer is required".into());
        }
        if self.num_agents < self.num_consumers {
            return fail(format!(
                "need at least as many agents as consumers (N={}, M={})",
                self.num_agents, self.num_consumers
            ));
        }
        if self.num_resources == 0 {
            return fail("at least one resource type is required".into());
        }
        if !(self.dim == 2 || self.dim == 3) {
            return fail(format!("dim must be 2 or 3, got {}", self.dim));
        }
        if !(self.bounds[1] > self.bounds[0]) {
            return fail(format!("empty bounds {:?}", self.bounds));
        }
        for (name, v) in [
            ("comm_radius", self.comm_radius),
            ("consumer_radius", self.consumer_radius),
            ("max_speed", self.max_speed),
            ("dt", self.dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, r) in [("demand_range", self.demand_range), ("supply_range", self.supply_range)] {
            if !(r[0] >= 0.0 && r[1] >= r[0]) {
                return fail(format!("{name} must satisfy 0 <= lo <= hi, got {r:?}"));
            }
        }
        if !(0.0..=1.0).contains(&self.persistent_prob) {
            return fail(format!("persistent_prob out of [0,1]: {}", self.persistent_prob));
        }
        if self.episode_steps == 0 {
            return fail("episode_steps must be positive".into());
        }
        Ok(())
    }
}

/// Reward magnitudes. `eps_col` is a squared-distance threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardGains {
    pub collision: f64,
    pub in_area: f64,
    pub release: f64,
    pub completion: f64,
    pub persistent: f64,
    pub coverage: f64,
    pub eps_col: f64,
    /// Steps between re-solves of the shaping assignment.
    pub reassign_every: usize,
}

impl Default for RewardGains {
    fn default() -> Self {
        Self {
            collision: 5.0,
            in_area: 0.1,
            release: 1.0,
            completion: 1.0,
            persistent: 0.05,
            coverage: 0.1,
            eps_col: 0.01,
            reassign_every: 10,
        }
    }
}

impl RewardGains {
    pub fn validate(&self, consumer_radius: f64) -> Result<()> {
        let nonneg = [
            self.collision,
            self.release,
            self.completion,
            self.persistent,
            self.coverage,
        ];
        if nonneg.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Config("reward gains must be non-negative".into()));
        }
        if !(self.in_area > 0.0) {
            return Err(Error::Config("in-area gain must be positive".into()));
        }
        if !(self.eps_col > 0.0 && self.eps_col < consumer_radius) {
            return Err(Error::Config(format!(
                "eps_col must lie in (0, R_m={consumer_radius}), got {}",
                self.eps_col
            )));
        }
        if self.reassign_every == 0 {
            return Err(Error::Config("reassign_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub k_p: f64,
    pub k_rep: f64,
    /// Squared-distance threshold for repulsion; falls back to the reward `eps_col`.
    pub eps_safe: Option<f64>,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { k_p: 1.0, k_rep: 0.05, eps_safe: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width G of the consumer and agent encoders.
    pub feature_dim: usize,
    /// ODE state width F.
    pub state_dim: usize,
    /// Hidden width of the encoder MLPs.
    pub encoder_hidden: usize,
    /// Hidden widths of the output MLP.
    pub head_hidden: Vec<usize>,
    pub state_dependent_std: bool,
    pub sigma_floor: f64,
    /// Initial pre-softplus standard deviation of the actor.
    pub init_std_raw: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            state_dim: 64,
            encoder_hidden: 64,
            head_hidden: vec![256, 256],
            state_dependent_std: true,
            sigma_floor: 1e-3,
            init_std_raw: -0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_grad_norm: f64,
    pub learning_rate: f64,
    /// Decay the learning rate linearly to zero over `iterations`.
    pub anneal_lr: bool,
    /// Multiplier on rewards seen by the learner; reported returns stay unscaled.
    pub reward_scale: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Weight of the contraction penalty; 0 disables it.
    pub alpha: f64,
    pub rollout_steps: usize,
    pub iterations: usize,
    /// Episodes used for the evaluation summary at the end of training.
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            batch_size: 64,
            epochs: 4,
            max_grad_norm: 0.5,
            learning_rate: 2e-4,
            anneal_lr: false,
            reward_scale: 1.0,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            alpha: 0.01,
            rollout_steps: 6144,
            iterations: 100,
            eval_episodes: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, episode_steps: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0,1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail(format!("gae_lambda must lie in [0,1], got {}", self.gae_lambda));
        }
        if !(self.clip_eps > 0.0) {
            return fail("clip_eps must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive".into());
        }
        if self.rollout_steps == 0 || self.rollout_steps % episode_steps != 0 {
            return fail(format!(
                "rollout_steps ({}) must be a positive multiple of episode_steps ({episode_steps})",
                self.rollout_steps
            ));
        }
        if self.batch_size > self.rollout_steps {
            return fail("batch_size exceeds rollout_steps".into());
        }
        if !(self.alpha >= 0.0) || !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return fail("alpha must be >= 0, learning_rate and max_grad_norm > 0".into());
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return fail(format!("reward_scale must be positive, got {}", self.reward_scale));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run, apart from the seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub rewards: RewardGains,
    pub expert: ExpertConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.rewards.validate(self.env.consumer_radius)?;
        self.train.validate(self.env.episode_steps)?;
        if self.model.feature_dim == 0 || self.model.state_dim == 0 || self.model.encoder_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(self.model.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config is always representable as TOML")
    }

    /// SHA-256 over the canonical JSON encoding of the config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn expert_eps_safe(&self) -> f64 {
        self.expert.eps_safe.unwrap_or(self.rewards.eps_col)
    }
}
