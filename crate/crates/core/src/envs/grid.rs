use rand::Rng as _;

use super::tabular::{TabularMdp, MAX_JOINT_ACTIONS};
use super::{EnvConfig, JointObservation};
use crate::error::{Error, Result};
use crate::rng::Rng;

const MAX_STATES: usize = 1_000_000;

/// Cooperative grid world.
///
/// Agents start in distinct corners and each must reach the diagonally
/// opposite corner. The shared reward is 1 on every step that begins with
/// all agents on their goals, 0 otherwise. Moves into a wall leave the
/// agent in place; agents may share a cell.
///
/// Agent `i` observes a one-hot of its own cell followed by one-hots of the
/// other agents' cells (in agent order). With `partial_obs` the other
/// agents' blocks are zeroed unless they are within one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CoopGrid {
    size: usize,
    n_agents: usize,
    horizon: usize,
    gamma: f64,
    slip: f64,
    partial_obs: bool,
}

impl CoopGrid {
    pub const NAME: &'static str = "coop_grid";
    pub const N_ACTIONS: usize = 4;
    /// Row/column deltas for up, down, left, right.
    const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

    pub(super) fn from_config(config: &EnvConfig) -> Result<Self> {
        let size = config
            .grid_size
            .ok_or_else(|| Error::Param("coop_grid requires grid_size".into()))?;
        if size < 2 {
            return Err(Error::Param("grid_size must be at least 2".into()));
        }
        if !(1..=4).contains(&config.n_agents) {
            return Err(Error::Param("coop_grid supports 1 to 4 agents".into()));
        }
        if config.payoff_table.is_some() {
            return Err(Error::Param("payoff_table does not apply to coop_grid".into()));
        }
        if config.action_count.is_some_and(|a| a != Self::N_ACTIONS) {
            return Err(Error::Param("coop_grid has exactly 4 actions".into()));
        }
        if !(0.0..1.0).contains(&config.slip) {
            return Err(Error::Param(format!("slip {} outside [0, 1)", config.slip)));
        }
        Ok(Self {
            size,
            n_agents: config.n_agents,
            horizon: config.horizon,
            gamma: config.gamma,
            slip: config.slip,
            partial_obs: config.partial_obs,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn obs_dim(&self) -> usize {
        self.n_agents * self.cells()
    }

    fn cells(&self) -> usize {
        self.size * self.size
    }

    pub fn n_states(&self) -> Option<usize> {
        self.cells().checked_pow(self.n_agents as u32)
    }

    fn corner(&self, k: usize) -> usize {
        let last = self.size - 1;
        let (r, c) = [(0, 0), (0, last), (last, 0), (last, last)][k];
        r * self.size + c
    }

    pub fn start_cell(&self, agent: usize) -> usize {
        self.corner(agent)
    }

    pub fn goal_cell(&self, agent: usize) -> usize {
        self.corner(3 - agent)
    }

    pub fn encode(&self, cells: &[usize]) -> usize {
        cells.iter().fold(0, |acc, &c| acc * self.cells() + c)
    }

    pub fn decode(&self, mut state: usize) -> Vec<usize> {
        let mut cells = vec![0; self.n_agents];
        for slot in cells.iter_mut().rev() {
            *slot = state % self.cells();
            state /= self.cells();
        }
        cells
    }

    pub(super) fn start_state(&self) -> usize {
        let cells: Vec<usize> = (0..self.n_agents).map(|i| self.start_cell(i)).collect();
        self.encode(&cells)
    }

    pub(super) fn reward(&self, state: usize) -> f64 {
        let cells = self.decode(state);
        let all_home = cells.iter().enumerate().all(|(i, &c)| c == self.goal_cell(i));
        if all_home {
            1.0
        } else {
            0.0
        }
    }

    fn moved(&self, cell: usize, action: usize) -> usize {
        let (r, c) = ((cell / self.size) as isize, (cell % self.size) as isize);
        let (dr, dc) = Self::MOVES[action];
        let last = self.size as isize - 1;
        let (nr, nc) = ((r + dr).clamp(0, last), (c + dc).clamp(0, last));
        nr as usize * self.size + nc as usize
    }

    pub(super) fn sample_next(&self, state: usize, actions: &[usize], rng: &mut Rng) -> usize {
        let cells: Vec<usize> = self
            .decode(state)
            .into_iter()
            .zip(actions)
            .map(|(cell, &a)| {
                let slipped = self.slip > 0.0 && rng.gen::<f64>() < self.slip;
                if slipped {
                    cell
                } else {
                    self.moved(cell, a)
                }
            })
            .collect();
        self.encode(&cells)
    }

    pub fn observe(&self, state: usize) -> JointObservation {
        let cells = self.decode(state);
        let (rows, cols) = (|c: usize| c / self.size, |c: usize| c % self.size);
        let obs = (0..self.n_agents)
            .map(|i| {
                let mut o = vec![0.0; self.obs_dim()];
                o[cells[i]] = 1.0;
                let others = (0..self.n_agents).filter(|&j| j != i);
                for (block, j) in others.enumerate() {
                    let visible = !self.partial_obs
                        || (rows(cells[i]).abs_diff(rows(cells[j])) <= 1
                            && cols(cells[i]).abs_diff(cols(cells[j])) <= 1);
                    if visible {
                        o[(block + 1) * self.cells() + cells[j]] = 1.0;
                    }
                }
                o
            })
            .collect();
        JointObservation(obs)
    }

    pub(super) fn tabular(&self) -> Result<TabularMdp> {
        let ns = self
            .n_states()
            .filter(|&n| n <= MAX_STATES)
            .ok_or_else(|| Error::Unsupported("grid state space too large to enumerate".into()))?;
        let na = Self::N_ACTIONS.pow(self.n_agents as u32);
        if na > MAX_JOINT_ACTIONS {
            return Err(Error::Unsupported("joint action space too large".into()));
        }
        let mut transitions = vec![0.0; ns * na * ns];
        let mut rewards = vec![0.0; ns * na];
        // Each agent independently stays with probability `slip`.
        let patterns: Vec<(Vec<bool>, f64)> = (0..1usize << self.n_agents)
            .map(|mask| {
                let slips: Vec<bool> = (0..self.n_agents).map(|i| mask >> i & 1 == 1).collect();
                let p = slips
                    .iter()
                    .map(|&s| if s { self.slip } else { 1.0 - self.slip })
                    .product::<f64>();
                (slips, p)
            })
            .filter(|(_, p)| *p > 0.0)
            .collect();
        for s in 0..ns {
            let cells = self.decode(s);
            let r = self.reward(s);
            for a in 0..na {
                let actions = super::decode_joint(a, self.n_agents, Self::N_ACTIONS);
                rewards[s * na + a] = r;
                for (slips, p) in &patterns {
                    let next: Vec<usize> = cells
                        .iter()
                        .zip(&actions)
                        .zip(slips)
                        .map(|((&c, &act), &slip)| if slip { c } else { self.moved(c, act) })
                        .collect();
                    transitions[(s * na + a) * ns + self.encode(&next)] += p;
                }
            }
        }
        let mut initial = vec![0.0; ns];
        initial[self.start_state()] = 1.0;
        Ok(TabularMdp {
            n_agents: self.n_agents,
            n_actions: Self::N_ACTIONS,
            n_states: ns,
            gamma: self.gamma,
            transitions,
            rewards,
            terminal: vec![false; ns],
            initial,
            observations: (0..ns).map(|s| self.observe(s).0).collect(),
        })
    }
}
