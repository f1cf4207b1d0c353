use super::tabular::{joint_index, TabularMdp, MAX_JOINT_ACTIONS};
use super::{EnvConfig, JointObservation};
use crate::error::{Error, Result};

/// Cooperative matrix game: one decision state with a shared payoff.
///
/// With `horizon == 1` the game ends after one move (state 1 is terminal);
/// otherwise it is replayed from the same state until the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGame {
    n_agents: usize,
    n_actions: usize,
    payoff: Vec<f64>,
    horizon: usize,
    gamma: f64,
}

impl MatrixGame {
    pub const NAME: &'static str = "matrix_game";
    pub const PLAY: usize = 0;
    pub const TERMINAL: usize = 1;

    pub(super) fn from_config(config: &EnvConfig) -> Result<Self> {
        let n_agents = config.n_agents;
        let n_actions = config.action_count.unwrap_or(2);
        if n_agents == 0 || n_actions == 0 {
            return Err(Error::Param("matrix game needs at least one agent and action".into()));
        }
        if config.grid_size.is_some() {
            return Err(Error::Param("grid_size does not apply to the matrix game".into()));
        }
        let joint = n_actions
            .checked_pow(n_agents as u32)
            .filter(|&j| j <= MAX_JOINT_ACTIONS)
            .ok_or_else(|| Error::Param("joint action space too large".into()))?;
        let payoff = match &config.payoff_table {
            Some(table) => table.clone(),
            None => {
                let mut table = vec![0.0; joint];
                table[0] = 1.0;
                table
            }
        };
        if payoff.len() != joint {
            return Err(Error::Param(format!(
                "payoff_table has {} entries, expected {joint}",
                payoff.len()
            )));
        }
        if payoff.iter().any(|r| !r.is_finite()) {
            return Err(Error::Param("payoff_table contains non-finite values".into()));
        }
        Ok(Self {
            n_agents,
            n_actions,
            payoff,
            horizon: config.horizon,
            gamma: config.gamma,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn payoff_table(&self) -> &[f64] {
        &self.payoff
    }

    pub fn payoff(&self, actions: &[usize]) -> f64 {
        self.payoff[joint_index(actions, self.n_actions)]
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        state == Self::TERMINAL
    }

    pub(super) fn next_state(&self) -> usize {
        if self.horizon == 1 {
            Self::TERMINAL
        } else {
            Self::PLAY
        }
    }

    pub fn observe(&self, state: usize) -> JointObservation {
        let flag = if state == Self::PLAY { 1.0 } else { 0.0 };
        JointObservation(vec![vec![flag]; self.n_agents])
    }

    /// Whether the payoff is exactly `sum_i f_i(a_i)` for some per-agent
    /// tables, i.e. representable by a linear value decomposition.
    pub fn is_additively_decomposable(&self) -> bool {
        let n = self.n_actions;
        let joint = self.payoff.len();
        // Additive iff r(a) = r(0) + sum_i [r(a_i e_i) - r(0)].
        (0..joint).all(|j| {
            let actions = super::decode_joint(j, self.n_agents, n);
            let base = self.payoff[0];
            let predicted = base
                + actions
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| {
                        let mut single = vec![0; self.n_agents];
                        single[i] = a;
                        self.payoff[joint_index(&single, n)] - base
                    })
                    .sum::<f64>();
            (predicted - self.payoff[j]).abs() < 1e-12
        })
    }

    pub(super) fn tabular(&self) -> TabularMdp {
        let ns = 2;
        let joint = self.payoff.len();
        let mut transitions = vec![0.0; ns * joint * ns];
        let mut rewards = vec![0.0; ns * joint];
        for a in 0..joint {
            transitions[(Self::PLAY * joint + a) * ns + self.next_state()] = 1.0;
            transitions[(Self::TERMINAL * joint + a) * ns + Self::TERMINAL] = 1.0;
            rewards[Self::PLAY * joint + a] = self.payoff[a];
        }
        TabularMdp {
            n_agents: self.n_agents,
            n_actions: self.n_actions,
            n_states: ns,
            gamma: self.gamma,
            transitions,
            rewards,
            terminal: vec![false, true],
            initial: vec![1.0, 0.0],
            observations: (0..ns).map(|s| self.observe(s).0).collect(),
        }
    }
}
