use ndarray::ArrayView2;

use super::config::EvalMode;
use super::losses::log_softmax;
use crate::approximator::Mlp;
use crate::envs::{sample_categorical, Env, JointAction, JointObservation, JointPolicy, TabularMdp};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

/// One softmax policy per agent; agent `i` sees only `o_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecentralizedPolicy {
    pis: Vec<Mlp>,
}

impl DecentralizedPolicy {
    pub fn new(pis: Vec<Mlp>) -> Self {
        Self { pis }
    }

    pub fn networks(&self) -> &[Mlp] {
        &self.pis
    }

    pub fn n_agents(&self) -> usize {
        self.pis.len()
    }

    pub fn logits(&self, agent: usize, obs: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.pis[agent].predict_batch(view)?.row(0).to_vec())
    }

    pub fn probs(&self, agent: usize, obs: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| Error::Shape(e.to_string()))?;
        let logits = self.pis[agent].predict_batch(view)?;
        Ok(log_softmax(&logits).row(0).iter().map(|x| x.exp()).collect())
    }

    pub fn act(&self, obs: &JointObservation, mode: EvalMode, rng: &mut Rng) -> Result<JointAction> {
        (0..self.n_agents())
            .map(|i| match mode {
                EvalMode::Stochastic => Ok(sample_categorical(&self.probs(i, obs.agent(i))?, rng)),
                EvalMode::Greedy => {
                    let logits = self.logits(i, obs.agent(i))?;
                    let best = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    Ok(logits.iter().position(|&x| x == best).unwrap_or(0))
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(JointAction)
    }

    /// Product of the local policies at every state of `mdp`.
    pub fn joint_policy(&self, mdp: &TabularMdp) -> Result<JointPolicy> {
        JointPolicy::from_local(mdp, |s, i| self.probs(i, &mdp.observations[s][i]))
    }

    pub fn check_compatible(&self, env: &Env) -> Result<()> {
        if self.n_agents() != env.n_agents() {
            return Err(Error::Compatibility(format!(
                "policy has {} agents, {} has {}",
                self.n_agents(),
                env.name(),
                env.n_agents()
            )));
        }
        for (i, pi) in self.pis.iter().enumerate() {
            if pi.input_dim() != env.obs_dim() || pi.output_dim() != env.n_actions() {
                return Err(Error::Compatibility(format!(
                    "policy {i} maps {}→{}, {} needs {}→{}",
                    pi.input_dim(),
                    pi.output_dim(),
                    env.name(),
                    env.obs_dim(),
                    env.n_actions()
                )));
            }
        }
        Ok(())
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Undiscounted returns of `episodes` decentralized rollouts.
pub fn evaluate(policy: &DecentralizedPolicy, env: &Env, episodes: usize, seed: u64, mode: EvalMode) -> Result<Stats> {
    policy.check_compatible(env)?;
    if episodes == 0 {
        return Err(Error::Param("evaluation needs at least one episode".into()));
    }
    let mut rng = substream(seed, "eval");
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let steps = env.run_episode(&mut rng, |obs, rng| policy.act(obs, mode, rng))?;
        returns.push(steps.iter().map(|s| s.reward).sum());
    }
    Ok(Stats::of(&returns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats() {
        assert_eq!(Stats::of(&[2.0]), Stats { mean: 2.0, std: 0.0 });
        let s = Stats::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
