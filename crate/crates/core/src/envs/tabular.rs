use crate::error::{Error, Result};

/// Explicit multi-agent MDP with enumerated states and joint actions.
///
/// Joint actions are indexed with agent 0 as the most significant digit in
/// base `n_actions`, so for two binary agents `(0,0),(0,1),(1,0),(1,1)` map
/// to `0..4`. Transition rows of terminal states are ignored by solvers;
/// terminals are absorbing with value 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_agents: usize,
    pub n_actions: usize,
    pub n_states: usize,
    pub gamma: f64,
    /// `[s][joint_a][s']`, flattened.
    pub transitions: Vec<f64>,
    /// `[s][joint_a]`, flattened.
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
    pub initial: Vec<f64>,
    /// `observations[s][i]` is agent `i`'s observation in state `s`.
    pub observations: Vec<Vec<Vec<f64>>>,
}

pub(crate) const MAX_JOINT_ACTIONS: usize = 4096;

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_joint_actions());
        if self.n_agents == 0 || self.n_actions == 0 || ns == 0 {
            return Err(Error::Param("empty MDP".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Param(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if self.transitions.len() != ns * na * ns
            || self.rewards.len() != ns * na
            || self.terminal.len() != ns
            || self.initial.len() != ns
            || self.observations.len() != ns
        {
            return Err(Error::Shape("tabular MDP arrays do not match state/action counts".into()));
        }
        for s in 0..ns {
            for a in 0..na {
                let row = self.transition_row(s, a);
                let total: f64 = row.iter().sum();
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Param(format!(
                        "transition row (s={s}, a={a}) is not a distribution (sum {total})"
                    )));
                }
                if !self.reward(s, a).is_finite() {
                    return Err(Error::Param(format!("non-finite reward at (s={s}, a={a})")));
                }
            }
            if self.observations[s].len() != self.n_agents {
                return Err(Error::Shape(format!("state {s} has wrong observation count")));
            }
        }
        let init: f64 = self.initial.iter().sum();
        if (init - 1.0).abs() > 1e-12 {
            return Err(Error::Param(format!("initial distribution sums to {init}")));
        }
        Ok(())
    }

    pub fn n_joint_actions(&self) -> usize {
        self.n_actions.pow(self.n_agents as u32)
    }

    pub fn transition_row(&self, s: usize, joint: usize) -> &[f64] {
        let ns = self.n_states;
        let start = (s * self.n_joint_actions() + joint) * ns;
        &self.transitions[start..start + ns]
    }

    pub fn reward(&self, s: usize, joint: usize) -> f64 {
        self.rewards[s * self.n_joint_actions() + joint]
    }

    /// `E_{s'|s,a}[values(s')]`.
    pub fn expected_next(&self, s: usize, joint: usize, values: &[f64]) -> f64 {
        self.transition_row(s, joint)
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }

    pub fn joint_index(&self, actions: &[usize]) -> usize {
        joint_index(actions, self.n_actions)
    }

    pub fn decode_joint(&self, joint: usize) -> Vec<usize> {
        decode_joint(joint, self.n_agents, self.n_actions)
    }

    /// Unregularized optimal values by value iteration (terminals fixed at 0).
    pub fn optimal_values(&self, tol: f64) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.n_states];
        for iteration in 0..100_000 {
            let next: Vec<f64> = (0..self.n_states)
                .map(|s| {
                    if self.terminal[s] {
                        return 0.0;
                    }
                    (0..self.n_joint_actions())
                        .map(|a| self.reward(s, a) + self.gamma * self.expected_next(s, a, &v))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let delta = sup_distance(&next, &v);
            v = next;
            if delta < tol {
                return Ok(v);
            }
            if iteration == 99_999 {
                return Err(Error::Convergence {
                    iterations: iteration + 1,
                    residual: delta,
                });
            }
        }
        unreachable!()
    }
}

impl TabularMdp {
    /// Random instance for property tests: rewards in `[-1, 1]`, dense random
    /// transitions, the first state non-terminal and initial, and each
    /// agent observing a one-hot of the state.
    pub fn random<R: rand::Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_agents: usize,
        n_actions: usize,
        gamma: f64,
        terminal_prob: f64,
    ) -> Self {
        let na = n_actions.pow(n_agents as u32);
        let terminal: Vec<bool> = (0..n_states)
            .map(|s| s > 0 && rng.gen::<f64>() < terminal_prob)
            .collect();
        let mut transitions = Vec::with_capacity(n_states * na * n_states);
        for _ in 0..n_states * na {
            let raw: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
            // Re-normalize so the row sums to one as exactly as floating point allows.
            let drift: f64 = 1.0 - row.iter().sum::<f64>();
            row[0] += drift;
            transitions.extend(row);
        }
        let rewards = (0..n_states * na).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mut initial = vec![0.0; n_states];
        initial[0] = 1.0;
        let observations = (0..n_states)
            .map(|s| {
                let mut o = vec![0.0; n_states];
                o[s] = 1.0;
                vec![o; n_agents]
            })
            .collect();
        Self {
            n_agents,
            n_actions,
            n_states,
            gamma,
            transitions,
            rewards,
            terminal,
            initial,
            observations,
        }
    }
}

pub fn joint_index(actions: &[usize], n_actions: usize) -> usize {
    actions.iter().fold(0, |acc, &a| acc * n_actions + a)
}

pub fn decode_joint(mut joint: usize, n_agents: usize, n_actions: usize) -> Vec<usize> {
    let mut out = vec![0; n_agents];
    for slot in out.iter_mut().rev() {
        *slot = joint % n_actions;
        joint /= n_actions;
    }
    out
}

pub(crate) fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
