//! Run configuration: every tunable in one TOML document.

use serde::{Deserialize, Serialize};

use crate::cpg::Modulation;
use crate::env::{EnvConfig, RewardCoefficients};
use crate::error::{Error, Result};
use crate::marl::Partition;
use crate::nn::{ActorKind, NetworkConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Twin critics, target smoothing and delayed actor updates.
    Td3,
    /// One critic, no target smoothing, actor updated every call.
    Ddpg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub actor: ActorKind,
    pub gamma: f64,
    /// Episode length limit.
    pub t_max: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub grad_clip: f64,
    pub babbling_steps: u64,
    /// Environment steps after babbling during which only the critics
    /// learn; the actor and its target stay fixed.
    pub critic_warmup: u64,
    /// Gradient updates after each collected segment.
    pub updates_per_segment: usize,
    pub policy_delay: u64,
    pub tau_c: usize,
    pub tau_o: usize,
    pub replay_capacity: usize,
    pub exploration_noise: f64,
    pub target_noise: f64,
    pub noise_clip: f64,
    pub polyak: f64,
    /// Weight in-window rewards by γ^k and bootstrap with γ^len.
    pub discount_within_window: bool,
    /// Environment steps of a `train` run.
    pub total_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Td3,
            actor: ActorKind::Cpg,
            gamma: 0.95,
            t_max: 2000,
            batch_size: 64,
            learning_rate: 2e-4,
            adam_betas: (0.9, 0.999),
            grad_clip: 2.0,
            babbling_steps: 10_000,
            critic_warmup: 0,
            updates_per_segment: 1,
            policy_delay: 2,
            tau_c: 5,
            tau_o: 5,
            replay_capacity: 1_000_000,
            exploration_noise: 0.1,
            target_noise: 0.2,
            noise_clip: 0.5,
            polyak: 0.995,
            discount_within_window: false,
            total_steps: 200_000,
        }
    }
}

impl TrainConfig {
    /// Joint-goal steps per actor decision.
    pub fn window(&self) -> usize {
        match self.actor {
            ActorKind::Cpg => self.tau_c,
            ActorKind::FeedForward => 1,
        }
    }

    pub fn critics(&self) -> usize {
        match self.algorithm {
            Algorithm::Td3 => 2,
            Algorithm::Ddpg => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.polyak) {
            return bad("polyak must lie in [0, 1]");
        }
        if self.t_max == 0 || self.batch_size == 0 || self.tau_c == 0 || self.tau_o == 0 {
            return bad("t_max, batch_size, tau_c and tau_o must be positive");
        }
        if self.replay_capacity == 0 || self.policy_delay == 0 {
            return bad("replay_capacity and policy_delay must be positive");
        }
        let nonneg = [
            self.learning_rate,
            self.grad_clip,
            self.exploration_noise,
            self.target_noise,
            self.noise_clip,
        ];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("rates and noise scales must be finite and non-negative");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Everything a run needs, embedded verbatim in each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub partition: Partition,
    /// Environment steps between checkpoints (0 disables them).
    pub checkpoint_every: u64,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub rewards: RewardCoefficients,
    pub modulation: Modulation,
    pub network: NetworkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            partition: Partition::Monolithic,
            checkpoint_every: 50_000,
            train: TrainConfig::default(),
            env: EnvConfig::default(),
            rewards: RewardCoefficients::default(),
            modulation: Modulation::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.env.validate()?;
        self.modulation.validate()?;
        self.network.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn table_defaults() {
        let t = TrainConfig::default();
        assert_eq!((t.gamma, t.t_max, t.batch_size, t.learning_rate), (0.95, 2000, 64, 2e-4));
        assert_eq!((t.babbling_steps, t.policy_delay, t.tau_c, t.tau_o), (10_000, 2, 5, 5));
        assert_eq!((t.grad_clip, t.replay_capacity), (2.0, 1_000_000));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[train]\ngamma = 2.0").is_err());
        assert!(RunConfig::from_toml("[modulation]\nalpha_amp = 0.9").is_err());
    }
}
