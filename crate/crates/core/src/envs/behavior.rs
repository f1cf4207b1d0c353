use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{sample_categorical, Env, JointAction, JointObservation, TabularMdp};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dataset quality level of a behavior policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Expert,
    Medium,
    Poor,
    Uniform,
}

impl Quality {
    /// Weight of the expert policy in the expert/uniform mixture.
    fn expert_share(self) -> f64 {
        match self {
            Quality::Expert => 1.0,
            Quality::Medium => 0.5,
            Quality::Poor => 0.1,
            Quality::Uniform => 0.0,
        }
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            "poor" => Ok(Quality::Poor),
            "uniform" => Ok(Quality::Uniform),
            other => Err(Error::Param(format!(
                "unknown quality {other:?} (expected expert, medium, poor or uniform)"
            ))),
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Poor => "poor",
            Quality::Uniform => "uniform",
        };
        f.write_str(s)
    }
}

/// Share of uniform noise inside the expert policy itself.
const EXPERT_NOISE: f64 = 0.05;

type ObsKey = Vec<u64>;

fn obs_key(obs: &[f64]) -> ObsKey {
    obs.iter().map(|x| x.to_bits()).collect()
}

/// Factored behavior policy `mu_tot(a|o) = prod_i mu_i(a_i|o_i)`, tabulated
/// over the observations an environment can emit.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    quality: Quality,
    n_actions: usize,
    tables: Vec<BTreeMap<ObsKey, Vec<f64>>>,
}

impl BehaviorPolicy {
    /// Expert rows are greedy w.r.t. the unregularized optimum with 5%
    /// uniform noise; other qualities mix the expert with uniform.
    pub fn for_env(env: &Env, quality: Quality) -> Result<Self> {
        let mdp = env.tabular_export()?;
        let na = mdp.n_actions;
        let uniform = 1.0 / na as f64;
        let greedy = if quality == Quality::Uniform {
            None
        } else {
            Some(greedy_joint_actions(&mdp)?)
        };
        let share = quality.expert_share();
        let mut tables = vec![BTreeMap::new(); mdp.n_agents];
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                continue;
            }
            for (i, table) in tables.iter_mut().enumerate() {
                table.entry(obs_key(&mdp.observations[s][i])).or_insert_with(|| {
                    (0..na)
                        .map(|a| {
                            let expert = match &greedy {
                                Some(g) => {
                                    let hit = if g[s][i] == a { 1.0 } else { 0.0 };
                                    (1.0 - EXPERT_NOISE) * hit + EXPERT_NOISE * uniform
                                }
                                None => uniform,
                            };
                            share * expert + (1.0 - share) * uniform
                        })
                        .collect()
                });
            }
        }
        Ok(Self {
            quality,
            n_actions: na,
            tables,
        })
    }

    pub fn quality(&self) -> Quality {
        self.quality
    }

    pub fn n_agents(&self) -> usize {
        self.tables.len()
    }

    pub fn probs(&self, agent: usize, obs: &[f64]) -> Result<&[f64]> {
        self.tables
            .get(agent)
            .and_then(|t| t.get(&obs_key(obs)))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("no behavior row for agent {agent} at {obs:?}")))
    }

    pub fn sample(&self, obs: &JointObservation, rng: &mut Rng) -> Result<JointAction> {
        (0..self.n_agents())
            .map(|i| Ok(sample_categorical(self.probs(i, obs.agent(i))?, rng)))
            .collect::<Result<Vec<_>>>()
            .map(JointAction)
    }

    pub fn min_probability(&self) -> f64 {
        self.tables
            .iter()
            .flat_map(|t| t.values().flatten())
            .fold(f64::INFINITY, |m, &p| m.min(p))
    }

    /// Product policy over joint actions for every state of `mdp`.
    pub fn joint_policy(&self, mdp: &TabularMdp) -> Result<JointPolicy> {
        JointPolicy::from_local(mdp, |s, i| {
            if mdp.terminal[s] {
                Ok(vec![1.0 / self.n_actions as f64; self.n_actions])
            } else {
                self.probs(i, &mdp.observations[s][i]).map(<[f64]>::to_vec)
            }
        })
    }
}

/// Greedy joint action of the unregularized optimum, split per agent.
/// Ties go to the lowest joint index.
fn greedy_joint_actions(mdp: &TabularMdp) -> Result<Vec<Vec<usize>>> {
    let v = mdp.optimal_values(1e-10)?;
    Ok((0..mdp.n_states)
        .map(|s| {
            let q: Vec<f64> = (0..mdp.n_joint_actions())
                .map(|a| mdp.reward(s, a) + mdp.gamma * mdp.expected_next(s, a, &v))
                .collect();
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let arg = q.iter().position(|&x| x >= best - 1e-9).unwrap_or(0);
            mdp.decode_joint(arg)
        })
        .collect())
}

/// Joint policy table `pi(a|s)` over states and joint actions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicy {
    pub n_states: usize,
    pub n_joint_actions: usize,
    pub probs: Vec<f64>,
}

impl JointPolicy {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_joint_actions..(s + 1) * self.n_joint_actions]
    }

    pub fn uniform(mdp: &TabularMdp) -> Self {
        let na = mdp.n_joint_actions();
        Self {
            n_states: mdp.n_states,
            n_joint_actions: na,
            probs: vec![1.0 / na as f64; mdp.n_states * na],
        }
    }

    /// Random factored policy with every local probability at least `floor / |A|`.
    pub fn random_factored<R: rand::Rng + ?Sized>(mdp: &TabularMdp, rng: &mut R, floor: f64) -> Self {
        let na = mdp.n_actions;
        Self::from_local(mdp, |_, _| {
            let raw: Vec<f64> = (0..na).map(|_| rng.gen::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            Ok(raw
                .iter()
                .map(|x| (1.0 - floor) * x / total + floor / na as f64)
                .collect())
        })
        .expect("local rows are always valid")
    }

    /// Builds `prod_i local(s, i)[a_i]`.
    pub fn from_local<F>(mdp: &TabularMdp, mut local: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Result<Vec<f64>>,
    {
        let na = mdp.n_joint_actions();
        let mut probs = Vec::with_capacity(mdp.n_states * na);
        for s in 0..mdp.n_states {
            let rows = (0..mdp.n_agents)
                .map(|i| local(s, i))
                .collect::<Result<Vec<_>>>()?;
            for j in 0..na {
                let actions = mdp.decode_joint(j);
                probs.push(rows.iter().zip(&actions).map(|(row, &a)| row[a]).product());
            }
        }
        Ok(Self {
            n_states: mdp.n_states,
            n_joint_actions: na,
            probs,
        })
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for s in 0..self.n_states {
            let row = self.row(s);
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > tol {
                return Err(Error::Input(format!(
                    "policy row for state {s} is not a distribution (sum {total})"
                )));
            }
        }
        Ok(())
    }
}
