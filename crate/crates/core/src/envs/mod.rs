//! Cooperative multi-agent environments with exact tabular export.
//!
//! Two environments ship: a cooperative matrix game (one decision state, or
//! repeated until the horizon) and `CoopGrid`, a small board on which every
//! agent must reach its own goal corner. Both enumerate their state space,
//! so [`Env::tabular_export`] hands the oracle the exact model that
//! [`Env::step`] samples from.

mod behavior;
mod grid;
mod matrix;
mod tabular;

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use behavior::{BehaviorPolicy, JointPolicy, Quality};
pub use grid::CoopGrid;
pub use matrix::MatrixGame;
pub use tabular::{decode_joint, joint_index, TabularMdp};
pub(crate) use tabular::sup_distance;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_GAMMA: f64 = 0.99;

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

/// On-disk environment description.
///
/// `payoff_table` (matrix game only) is flat over joint actions with agent 0
/// as the most significant digit. When omitted the payoff is 1 for the
/// all-zeros joint action and 0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub env_name: String,
    pub n_agents: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff_table: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_count: Option<usize>,
    pub horizon: usize,
    pub seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// CoopGrid: probability that an agent's move is replaced by staying put.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub slip: f64,
    /// CoopGrid: hide other agents unless they are within one cell.
    #[serde(default, skip_serializing_if = "is_false")]
    pub partial_obs: bool,
}

impl EnvConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: EnvConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Env::from_config(&config)?;
        Ok(config)
    }

    pub fn matrix_game(payoff: Vec<f64>) -> Self {
        Self {
            env_name: MatrixGame::NAME.into(),
            n_agents: 2,
            grid_size: None,
            action_count: Some(2),
            payoff_table: Some(payoff),
            horizon: 1,
            seed: 0,
            gamma: DEFAULT_GAMMA,
            slip: 0.0,
            partial_obs: false,
        }
    }

    pub fn coop_grid(grid_size: usize) -> Self {
        Self {
            env_name: CoopGrid::NAME.into(),
            n_agents: 2,
            grid_size: Some(grid_size),
            action_count: None,
            payoff_table: None,
            horizon: 20,
            seed: 0,
            gamma: DEFAULT_GAMMA,
            slip: 0.0,
            partial_obs: false,
        }
    }
}

/// Per-agent observation vectors `(o_1, ..., o_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointObservation(pub Vec<Vec<f64>>);

impl JointObservation {
    pub fn n_agents(&self) -> usize {
        self.0.len()
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.0[i]
    }

    /// Concatenation of all agents' vectors (the mixer's input).
    pub fn concat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

/// Per-agent discrete actions `(a_1, ..., a_n)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointAction(pub Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    pub id: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub obs: JointObservation,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Matrix(MatrixGame),
    Grid(CoopGrid),
}

impl Env {
    pub fn from_config(config: &EnvConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::Param("horizon must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&config.gamma) {
            return Err(Error::Param(format!("gamma {} outside [0, 1)", config.gamma)));
        }
        match config.env_name.as_str() {
            MatrixGame::NAME => MatrixGame::from_config(config).map(Env::Matrix),
            CoopGrid::NAME => CoopGrid::from_config(config).map(Env::Grid),
            other => Err(Error::Param(format!(
                "unknown env_name {other:?} (expected {:?} or {:?})",
                MatrixGame::NAME,
                CoopGrid::NAME
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Env::Matrix(_) => MatrixGame::NAME,
            Env::Grid(_) => CoopGrid::NAME,
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Env::Matrix(m) => m.n_agents(),
            Env::Grid(g) => g.n_agents(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Env::Matrix(m) => m.n_actions(),
            Env::Grid(_) => CoopGrid::N_ACTIONS,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Matrix(_) => 1,
            Env::Grid(g) => g.obs_dim(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::Matrix(m) => m.horizon(),
            Env::Grid(g) => g.horizon(),
        }
    }

    pub fn observe(&self, state: usize) -> JointObservation {
        match self {
            Env::Matrix(m) => m.observe(state),
            Env::Grid(g) => g.observe(state),
        }
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        match self {
            Env::Matrix(m) => m.is_terminal(state),
            Env::Grid(_) => false,
        }
    }

    pub fn reset(&self, _rng: &mut Rng) -> (EnvState, JointObservation) {
        let id = match self {
            Env::Matrix(_) => MatrixGame::PLAY,
            Env::Grid(g) => g.start_state(),
        };
        (EnvState { id, t: 0 }, self.observe(id))
    }

    /// One environment transition. `done` is set when the next state is
    /// terminal or the horizon is reached.
    pub fn step(&self, state: EnvState, action: &JointAction, rng: &mut Rng) -> Result<StepOutcome> {
        if self.is_terminal(state.id) {
            return Err(Error::Usage(format!("cannot step terminal state {}", state.id)));
        }
        if state.t >= self.horizon() {
            return Err(Error::Usage(format!("episode already reached horizon {}", self.horizon())));
        }
        self.check_action(action)?;
        let (next, reward) = match self {
            Env::Matrix(m) => (m.next_state(), m.payoff(&action.0)),
            Env::Grid(g) => (g.sample_next(state.id, &action.0, rng), g.reward(state.id)),
        };
        let t = state.t + 1;
        Ok(StepOutcome {
            state: EnvState { id: next, t },
            obs: self.observe(next),
            reward,
            done: self.is_terminal(next) || t >= self.horizon(),
        })
    }

    /// Exact model of `reset`/`step` (without the horizon cap).
    pub fn tabular_export(&self) -> Result<TabularMdp> {
        let mdp = match self {
            Env::Matrix(m) => m.tabular(),
            Env::Grid(g) => g.tabular()?,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn check_action(&self, action: &JointAction) -> Result<()> {
        if action.0.len() != self.n_agents() {
            return Err(Error::Shape(format!(
                "joint action has {} entries for {} agents",
                action.0.len(),
                self.n_agents()
            )));
        }
        if let Some(&bad) = action.0.iter().find(|&&a| a >= self.n_actions()) {
            return Err(Error::Param(format!(
                "action {bad} out of range (|A| = {})",
                self.n_actions()
            )));
        }
        Ok(())
    }

    /// Runs one episode, asking `act` for a joint action at every step.
    pub fn run_episode<F>(&self, rng: &mut Rng, mut act: F) -> Result<Vec<EpisodeStep>>
    where
        F: FnMut(&JointObservation, &mut Rng) -> Result<JointAction>,
    {
        let (mut state, mut obs) = self.reset(rng);
        let mut steps = Vec::new();
        loop {
            let action = act(&obs, rng)?;
            let out = self.step(state, &action, rng)?;
            steps.push(EpisodeStep {
                t: state.t,
                obs,
                action,
                reward: out.reward,
                next_obs: out.obs.clone(),
                done: out.done,
            });
            if out.done {
                return Ok(steps);
            }
            state = out.state;
            obs = out.obs;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub t: usize,
    pub obs: JointObservation,
    pub action: JointAction,
    pub reward: f64,
    pub next_obs: JointObservation,
    pub done: bool,
}

/// Inverse-CDF draw from a probability row.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
