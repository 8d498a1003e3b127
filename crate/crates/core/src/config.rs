//! Model, regularizer, loss and training configuration.
//!
//! Configs are JSON documents; absent keys take the defaults below and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StdpConfig {
    pub enabled: bool,
    /// Event sigmoid temperature κ.
    pub kappa: f64,
    pub theta_u: f64,
    pub theta_s: f64,
    /// Backward-causality penalty β ∈ (0, 1].
    pub beta: f64,
    /// Teacher-forcing blend ρ ∈ [0, 1].
    pub rho: f64,
}

impl Default for StdpConfig {
    fn default() -> Self {
        StdpConfig { enabled: true, kappa: 10.0, theta_u: 0.0, theta_s: 0.0, beta: 0.5, rho: 0.5 }
    }
}

/// Coefficients of the composite objective; the main term has weight 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub aux: f64,
    pub complexity: f64,
    pub diversity: f64,
    pub flow: f64,
    pub stdp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { aux: 0.4, complexity: 0.1, diversity: 0.05, flow: 0.1, stdp: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// First restart period of the cosine schedule, in epochs.
    pub t0: usize,
    pub t_mult: usize,
    pub eta_min: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub accum_steps: usize,
    pub augment: bool,
    /// Early-stop targets. Training ends at the first epoch where every
    /// target that is set holds: validation Dice at least `target_dice`, and
    /// the epoch's mean main loss at most `target_main_loss`.
    pub target_dice: Option<f64>,
    pub target_main_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            t0: 10,
            t_mult: 2,
            eta_min: 0.0,
            patience: 200,
            max_epochs: 1000,
            seed: 42,
            accum_steps: 1,
            augment: true,
            target_dice: None,
            target_main_loss: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input resolution; the temporal core runs at a quarter of it.
    pub input_size: usize,
    pub base_channel: usize,
    pub max_groups: usize,
    pub hidden_channels: usize,
    pub group_embed_dim: usize,
    pub pos_kernel: usize,
    pub max_flow_steps: usize,
    pub reward_scale: f64,
    pub qk_dim: usize,
    pub dt: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_eps: f64,
    /// Number of Euler steps per group.
    pub time_steps: usize,
    pub norm_groups: usize,
    pub complexity_hidden: usize,
    pub fast_head_channels: usize,
    /// Overrides the complexity-driven group count (ablations).
    pub fixed_groups: Option<usize>,
    pub stdp: StdpConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 224,
            base_channel: 32,
            max_groups: 5,
            hidden_channels: 64,
            group_embed_dim: 16,
            pos_kernel: 3,
            max_flow_steps: 3,
            reward_scale: 0.1,
            qk_dim: 7,
            dt: 1.0,
            tau_min: 1e-2,
            tau_max: 1e3,
            tau_eps: 1e-6,
            time_steps: 2,
            norm_groups: 8,
            complexity_hidden: 16,
            fast_head_channels: 8,
            fixed_groups: None,
            stdp: StdpConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Reduced-resolution variant used for fast experiments: 64×64 input,
    /// 16×16 temporal core.
    pub fn reduced() -> Self {
        ModelConfig { input_size: 64, ..Self::default() }
    }

    /// Spatial extent of the temporal core (the deepest pyramid level).
    pub fn core_size(&self) -> usize {
        self.input_size / 4
    }

    /// Channels of the concatenated encoder + positional features.
    pub fn ltc_channels(&self) -> usize {
        self.base_channel + self.group_embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(4) {
            return fail(format!("input_size {} must be a positive multiple of 4", self.input_size));
        }
        for (name, v) in [
            ("base_channel", self.base_channel),
            ("max_groups", self.max_groups),
            ("hidden_channels", self.hidden_channels),
            ("group_embed_dim", self.group_embed_dim),
            ("qk_dim", self.qk_dim),
            ("time_steps", self.time_steps),
            ("norm_groups", self.norm_groups),
            ("complexity_hidden", self.complexity_hidden),
            ("fast_head_channels", self.fast_head_channels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.pos_kernel.is_multiple_of(2) {
            return fail(format!("pos_kernel {} must be odd", self.pos_kernel));
        }
        for (name, c) in [("base_channel", self.base_channel), ("hidden_channels", self.hidden_channels)] {
            if c % self.norm_groups != 0 {
                return fail(format!("{name} {c} not divisible by norm_groups {}", self.norm_groups));
            }
        }
        if !(self.dt > 0.0) {
            return fail("dt must be positive".into());
        }
        if !(self.tau_min > 0.0 && self.tau_min < self.tau_max) {
            return fail("tau bounds must satisfy 0 < tau_min < tau_max".into());
        }
        if !(self.tau_eps >= 0.0) || !(self.reward_scale >= 0.0) {
            return fail("tau_eps and reward_scale must be non-negative".into());
        }
        if let Some(g) = self.fixed_groups {
            if g == 0 || g > self.max_groups {
                return fail(format!("fixed_groups {g} must be in 1..={}", self.max_groups));
            }
        }
        let s = &self.stdp;
        if !(s.kappa > 0.0) || !(s.beta > 0.0 && s.beta <= 1.0) || !(0.0..=1.0).contains(&s.rho) {
            return fail("stdp requires kappa > 0, beta in (0, 1], rho in [0, 1]".into());
        }
        if s.enabled && self.time_steps < 2 {
            return fail(format!("STDP needs at least 2 time steps, got {}", self.time_steps));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.accum_steps == 0 || t.t0 == 0 || t.t_mult == 0 {
            return fail("batch_size, accum_steps, t0 and t_mult must be positive".into());
        }
        if !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) {
            return fail("lr and weight_decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Loads a config file; the literal names `default` and `reduced` select
    /// the built-in presets.
    pub fn load(path: &str) -> Result<Self> {
        match path {
            "default" => Ok(Self::default()),
            "reduced" => Ok(Self::reduced()),
            _ => {
                let text = std::fs::read_to_string(Path::new(path)).map_err(|e| Error::io(path, e))?;
                Self::from_json(&text)
            }
        }
    }
}
