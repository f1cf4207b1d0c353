//! Offline datasets.
//!
//! A dataset directory holds `manifest.json` and `transitions.jsonl`, one
//! JSON object per line with keys `ep`, `t`, `obs`, `act`, `rew`,
//! `next_obs`, `done`. Field order is fixed by the struct definitions, so
//! saving a loaded dataset reproduces the original bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{BehaviorPolicy, Env, EnvConfig, JointAction, JointObservation};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, substream, Rng};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRANSITIONS_FILE: &str = "transitions.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub ep: usize,
    pub t: usize,
    pub obs: JointObservation,
    pub act: JointAction,
    pub rew: f64,
    pub next_obs: JointObservation,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub env_name: String,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub action_count: usize,
    pub n_episodes: usize,
    pub n_transitions: usize,
    pub behavior_quality: String,
    pub seed: u64,
    /// Mean undiscounted episode return.
    pub avg_return: f64,
    pub env: EnvConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub transitions: Vec<Transition>,
}

/// Aligned arrays for one minibatch. Per-agent blocks are indexed by agent.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `obs[i]` is `batch × obs_dim` for agent `i`.
    pub obs: Vec<Array2<f64>>,
    pub next_obs: Vec<Array2<f64>>,
    /// `actions[i][row]`.
    pub actions: Vec<Vec<usize>>,
    pub rewards: Array1<f64>,
    /// 1.0 where the episode ended at this transition.
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.obs.len()
    }
}

fn episode_returns(transitions: &[Transition]) -> BTreeMap<usize, f64> {
    let mut returns = BTreeMap::new();
    for tr in transitions {
        *returns.entry(tr.ep).or_insert(0.0) += tr.rew;
    }
    returns
}

fn mean_return(transitions: &[Transition]) -> f64 {
    let returns = episode_returns(transitions);
    if returns.is_empty() {
        return 0.0;
    }
    returns.values().sum::<f64>() / returns.len() as f64
}

impl Dataset {
    /// Rolls out `behavior` for `episodes` episodes. Episode `k` draws from
    /// its own sub-stream of `seed`.
    pub fn generate(env_config: &EnvConfig, behavior: &BehaviorPolicy, episodes: usize, seed: u64) -> Result<Self> {
        if episodes == 0 {
            return Err(Error::Param("episodes must be at least 1".into()));
        }
        let env = Env::from_config(env_config)?;
        let mut transitions = Vec::new();
        for ep in 0..episodes {
            let mut rng = indexed_substream(seed, "data", ep as u64);
            let steps = env.run_episode(&mut rng, |obs, rng| behavior.sample(obs, rng))?;
            transitions.extend(steps.into_iter().map(|s| Transition {
                ep,
                t: s.t,
                obs: s.obs,
                act: s.action,
                rew: s.reward,
                next_obs: s.next_obs,
                done: s.done,
            }));
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            env_name: env.name().into(),
            n_agents: env.n_agents(),
            obs_dim: env.obs_dim(),
            action_count: env.n_actions(),
            n_episodes: episodes,
            n_transitions: transitions.len(),
            behavior_quality: behavior.quality().to_string(),
            seed,
            avg_return: mean_return(&transitions),
            env: env_config.clone(),
        };
        Ok(Self {
            manifest,
            transitions,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Input(format!("manifest serialization: {e}")))?;
        text.push('\n');
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

        let path = dir.join(TRANSITIONS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for tr in &self.transitions {
            let line = serde_json::to_string(tr).map_err(|e| Error::Input(format!("transition serialization: {e}")))?;
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_error(&manifest_path, e))?;
        // Check the version before the full schema so old files get a clear message.
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Version {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: FORMAT_VERSION,
                })
            }
            None => {
                return Err(Error::Parse {
                    path: manifest_path,
                    line: 1,
                    message: "missing integer field `format_version`".into(),
                })
            }
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: 1,
            message: e.to_string(),
        })?;

        let path = dir.join(TRANSITIONS_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut transitions = Vec::with_capacity(manifest.n_transitions);
        for (k, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let tr: Transition = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: k + 1,
                message: e.to_string(),
            })?;
            check_transition(&tr, &manifest).map_err(|message| Error::Parse {
                path: path.clone(),
                line: k + 1,
                message,
            })?;
            transitions.push(tr);
        }
        let data = Self {
            manifest,
            transitions,
        };
        data.check_counts()?;
        Ok(data)
    }

    fn check_counts(&self) -> Result<()> {
        let m = &self.manifest;
        if self.transitions.len() != m.n_transitions {
            return Err(Error::Integrity(format!(
                "manifest lists {} transitions, found {}",
                m.n_transitions,
                self.transitions.len()
            )));
        }
        let episodes = episode_returns(&self.transitions).len();
        if episodes != m.n_episodes {
            return Err(Error::Integrity(format!(
                "manifest lists {} episodes, found {episodes}",
                m.n_episodes
            )));
        }
        Ok(())
    }

    /// Subsamples whole episodes from each input according to
    /// `proportions`, then renumbers and shuffles the episodes.
    pub fn mix(datasets: &[Dataset], proportions: &[f64], seed: u64) -> Result<Self> {
        if datasets.is_empty() || datasets.len() != proportions.len() {
            return Err(Error::Param(format!(
                "{} datasets with {} proportions",
                datasets.len(),
                proportions.len()
            )));
        }
        if proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Param(format!("proportions must lie in [0, 1], got {proportions:?}")));
        }
        let total: f64 = proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("proportions sum to {total}, not 1")));
        }
        let first = &datasets[0].manifest;
        for d in &datasets[1..] {
            let m = &d.manifest;
            if m.env_name != first.env_name
                || m.n_agents != first.n_agents
                || m.obs_dim != first.obs_dim
                || m.action_count != first.action_count
            {
                return Err(Error::Param(format!(
                    "cannot mix {} ({} agents, obs {}, {} actions) with {} ({} agents, obs {}, {} actions)",
                    first.env_name,
                    first.n_agents,
                    first.obs_dim,
                    first.action_count,
                    m.env_name,
                    m.n_agents,
                    m.obs_dim,
                    m.action_count
                )));
            }
        }

        let mut rng = substream(seed, "mix");
        let mut episodes: Vec<Vec<&Transition>> = Vec::new();
        for (d, &p) in datasets.iter().zip(proportions) {
            let mut by_ep: BTreeMap<usize, Vec<&Transition>> = BTreeMap::new();
            for tr in &d.transitions {
                by_ep.entry(tr.ep).or_default().push(tr);
            }
            let count = (p * by_ep.len() as f64).round() as usize;
            let all: Vec<Vec<&Transition>> = by_ep.into_values().collect();
            episodes.extend(all.choose_multiple(&mut rng, count).cloned());
        }
        episodes.shuffle(&mut rng);

        let transitions: Vec<Transition> = episodes
            .iter()
            .enumerate()
            .flat_map(|(new_ep, steps)| {
                steps.iter().map(move |tr| Transition {
                    ep: new_ep,
                    ..(*tr).clone()
                })
            })
            .collect();
        let qualities: Vec<String> = datasets
            .iter()
            .zip(proportions)
            .map(|(d, p)| format!("{}:{p}", d.manifest.behavior_quality))
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            n_episodes: episodes.len(),
            n_transitions: transitions.len(),
            behavior_quality: qualities.join("+"),
            seed,
            avg_return: mean_return(&transitions),
            ..first.clone()
        };
        Ok(Self {
            manifest,
            transitions,
        })
    }

    /// Uniform sampling with replacement.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
        if self.transitions.is_empty() {
            return Err(Error::Usage("cannot sample from an empty dataset".into()));
        }
        if batch_size == 0 || batch_size > self.transitions.len() {
            return Err(Error::Usage(format!(
                "batch size {batch_size} must be between 1 and the dataset size {}",
                self.transitions.len()
            )));
        }
        let indices: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..self.transitions.len())).collect();
        Ok(self.batch_from_indices(&indices))
    }

    /// Assembles the rows `indices` (in order) into a batch.
    pub fn batch_from_indices(&self, indices: &[usize]) -> Batch {
        let m = &self.manifest;
        let b = indices.len();
        let mut obs = vec![Array2::zeros((b, m.obs_dim)); m.n_agents];
        let mut next_obs = vec![Array2::zeros((b, m.obs_dim)); m.n_agents];
        let mut actions = vec![Vec::with_capacity(b); m.n_agents];
        let mut rewards = Array1::zeros(b);
        let mut dones = Array1::zeros(b);
        for (row, &k) in indices.iter().enumerate() {
            let tr = &self.transitions[k];
            for i in 0..m.n_agents {
                for (dst, &src) in obs[i].row_mut(row).iter_mut().zip(tr.obs.agent(i)) {
                    *dst = src;
                }
                for (dst, &src) in next_obs[i].row_mut(row).iter_mut().zip(tr.next_obs.agent(i)) {
                    *dst = src;
                }
                actions[i].push(tr.act.0[i]);
            }
            rewards[row] = tr.rew;
            dones[row] = if tr.done { 1.0 } else { 0.0 };
        }
        Batch {
            indices: indices.to_vec(),
            obs,
            next_obs,
            actions,
            rewards,
            dones,
        }
    }

    /// Every transition, in file order.
    pub fn full_batch(&self) -> Batch {
        let all: Vec<usize> = (0..self.transitions.len()).collect();
        self.batch_from_indices(&all)
    }

    /// Empirical per-agent action frequencies.
    pub fn action_frequencies(&self) -> Vec<Vec<f64>> {
        let m = &self.manifest;
        let mut counts = vec![vec![0.0; m.action_count]; m.n_agents];
        for tr in &self.transitions {
            for (i, &a) in tr.act.0.iter().enumerate() {
                counts[i][a] += 1.0;
            }
        }
        let n = self.transitions.len().max(1) as f64;
        for row in &mut counts {
            row.iter_mut().for_each(|c| *c /= n);
        }
        counts
    }
}

fn parse_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line: e.line(),
        message: e.to_string(),
    }
}

fn check_transition(tr: &Transition, m: &Manifest) -> std::result::Result<(), String> {
    let dims_ok = |o: &JointObservation| o.n_agents() == m.n_agents && o.0.iter().all(|x| x.len() == m.obs_dim);
    if !dims_ok(&tr.obs) || !dims_ok(&tr.next_obs) {
        return Err(format!(
            "observation shape does not match manifest ({} agents × {})",
            m.n_agents, m.obs_dim
        ));
    }
    if tr.act.0.len() != m.n_agents || tr.act.0.iter().any(|&a| a >= m.action_count) {
        return Err(format!("action {:?} invalid for {} actions", tr.act.0, m.action_count));
    }
    if !tr.rew.is_finite() {
        return Err("reward is not finite".into());
    }
    Ok(())
}
