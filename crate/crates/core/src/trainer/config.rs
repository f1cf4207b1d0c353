use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::WeightInput;

/// Trainer ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Mixer weights from the joint observation, used everywhere.
    Full,
    /// Unit weights in the V and policy objectives.
    NoW,
    /// w-network sees only the agent's own observation.
    LocalW,
}

impl Variant {
    pub fn weight_input(self) -> WeightInput {
        match self {
            Variant::LocalW => WeightInput::Local,
            Variant::Full | Variant::NoW => WeightInput::Joint,
        }
    }

    /// Whether the V and policy objectives use the learned mixer weights.
    pub fn uses_mixer_weights(self) -> bool {
        self != Variant::NoW
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_w" => Ok(Variant::NoW),
            "local_w" => Ok(Variant::LocalW),
            other => Err(Error::Param(format!(
                "unknown variant {other:?} (expected full, no_w or local_w)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoW => "no_w",
            Variant::LocalW => "local_w",
        })
    }
}

/// Parses an ablation tag and returns the default configuration for it.
pub fn ablation_variant(tag: &str) -> Result<TrainConfig> {
    Ok(TrainConfig {
        variant: tag.parse()?,
        ..TrainConfig::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Sample each agent's action from its policy.
    Stochastic,
    /// Take each agent's most likely action (lowest index on ties).
    Greedy,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(EvalMode::Stochastic),
            "greedy" => Ok(EvalMode::Greedy),
            other => Err(Error::Param(format!(
                "unknown evaluation mode {other:?} (expected stochastic or greedy)"
            ))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Stochastic => "stochastic",
            EvalMode::Greedy => "greedy",
        })
    }
}

pub const DEFAULT_EVAL_EPISODES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub lr_q: f64,
    pub lr_v: f64,
    pub lr_pi: f64,
    pub lr_mixer: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Upper clamp on the exponent inside `exp` in the V objective.
    pub exp_clamp: f64,
    /// Upper clamp on the exponential policy weight.
    pub weight_clamp: f64,
    /// Hidden widths of the per-agent Q, V and policy networks.
    pub hidden: Vec<usize>,
    /// Hidden widths of the w- and b-networks.
    pub mixer_hidden: Vec<usize>,
    /// A metrics row is written every `eval_interval` steps and at the end.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: crate::envs::DEFAULT_GAMMA,
            tau: 0.005,
            lr_q: 5e-4,
            lr_v: 5e-4,
            lr_pi: 5e-4,
            lr_mixer: 5e-4,
            batch_size: 128,
            steps: 20_000,
            seed: 0,
            exp_clamp: 20.0,
            weight_clamp: 100.0,
            hidden: vec![256, 256],
            mixer_hidden: vec![64],
            eval_interval: 1000,
            eval_episodes: DEFAULT_EVAL_EPISODES,
            eval_mode: EvalMode::Stochastic,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("lr_q", self.lr_q),
            ("lr_v", self.lr_v),
            ("lr_pi", self.lr_pi),
            ("lr_mixer", self.lr_mixer),
            ("exp_clamp", self.exp_clamp),
            ("weight_clamp", self.weight_clamp),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Param(format!("{name} must be positive and finite, got {value}")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Param(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Param(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Param("eval_interval must be at least 1".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Param("eval_episodes must be at least 1".into()));
        }
        if self.hidden.contains(&0) || self.mixer_hidden.contains(&0) {
            return Err(Error::Param("hidden widths must be positive".into()));
        }
        Ok(())
    }
}
