use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use super::losses::q_inputs;
use super::policy::DecentralizedPolicy;
use crate::approximator::Mlp;
use crate::error::{Error, Result};
use crate::mixer::{Mixer, WeightInput};
use crate::rng::Rng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
}

/// All trainable networks: per-agent Q, target Q, V and policy, plus the mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: Dims,
    pub q: Vec<Mlp>,
    pub q_target: Vec<Mlp>,
    pub v: Vec<Mlp>,
    pub pi: Vec<Mlp>,
    pub mixer: Mixer,
}

impl Model {
    /// Draws networks in a fixed order: for each agent Q, V, policy; then the
    /// mixer. Target networks start as copies of Q.
    pub fn new(dims: Dims, config: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        let Dims {
            n_agents,
            obs_dim,
            n_actions,
        } = dims;
        let (mut q, mut v, mut pi) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n_agents {
            q.push(Mlp::new(obs_dim + n_actions, &config.hidden, 1, rng)?);
            v.push(Mlp::new(obs_dim, &config.hidden, 1, rng)?);
            pi.push(Mlp::new(obs_dim, &config.hidden, n_actions, rng)?);
        }
        let mixer = Mixer::new(n_agents, obs_dim, &config.mixer_hidden, config.variant.weight_input(), rng)?;
        Ok(Self {
            dims,
            q_target: q.clone(),
            q,
            v,
            pi,
            mixer,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.dims.n_agents
    }

    pub fn n_actions(&self) -> usize {
        self.dims.n_actions
    }

    pub fn policy(&self) -> DecentralizedPolicy {
        DecentralizedPolicy::new(self.pi.clone())
    }

    /// `(w, b, Q_i values, Q_tot)` for one joint observation and joint action.
    pub fn q_tot(&self, obs: &[&[f64]], actions: &[usize]) -> Result<(Vec<f64>, f64, Vec<f64>, f64)> {
        let (w, b) = self.mixer.weights(obs)?;
        let mut qs = Vec::with_capacity(self.n_agents());
        for (i, (o, &a)) in obs.iter().zip(actions).enumerate() {
            let view = ndarray::ArrayView2::from_shape((1, o.len()), o).map_err(|e| Error::Shape(e.to_string()))?;
            let x = q_inputs(view, &[a], self.n_actions())?;
            qs.push(self.q[i].predict_batch(x.view())?[[0, 0]]);
        }
        let total = crate::mixer::mix_q(&w, b, &qs)?;
        Ok((w, b, qs, total))
    }

    /// `(w, b, V_i values, V_tot)` for one joint observation.
    pub fn v_tot(&self, obs: &[&[f64]]) -> Result<(Vec<f64>, f64, Vec<f64>, f64)> {
        let (w, b) = self.mixer.weights(obs)?;
        let mut vs = Vec::with_capacity(self.n_agents());
        for (i, o) in obs.iter().enumerate() {
            let view = ndarray::ArrayView2::from_shape((1, o.len()), o).map_err(|e| Error::Shape(e.to_string()))?;
            vs.push(self.v[i].predict_batch(view)?[[0, 0]]);
        }
        let total = crate::mixer::mix_v(&w, b, &vs)?;
        Ok((w, b, vs, total))
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.q_target)
            .chain(&self.v)
            .chain(&self.pi)
            .chain([&self.mixer.w_net, &self.mixer.b_net])
            .all(Mlp::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Omiga,
    Bc,
}

/// On-disk form of a trained model: network name → layer list, plus the
/// dimensions and the configuration that produced it.
///
/// OMIGA checkpoints hold `q_i`, `q_target_i`, `v_i`, `pi_i` for every agent
/// and `mixer_w`, `mixer_b`. Behavior-cloning checkpoints hold only `pi_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub env_name: String,
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixer_input: Option<WeightInput>,
    pub networks: BTreeMap<String, Mlp>,
    pub config: TrainConfig,
}

fn take(networks: &BTreeMap<String, Mlp>, name: &str) -> Result<Mlp> {
    networks
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Compatibility(format!("checkpoint has no network {name:?}")))
}

impl Checkpoint {
    pub fn from_model(model: &Model, env_name: &str, config: &TrainConfig) -> Self {
        let mut networks = BTreeMap::new();
        for i in 0..model.n_agents() {
            networks.insert(format!("q_{i}"), model.q[i].clone());
            networks.insert(format!("q_target_{i}"), model.q_target[i].clone());
            networks.insert(format!("v_{i}"), model.v[i].clone());
            networks.insert(format!("pi_{i}"), model.pi[i].clone());
        }
        networks.insert("mixer_w".into(), model.mixer.w_net.clone());
        networks.insert("mixer_b".into(), model.mixer.b_net.clone());
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Omiga,
            env_name: env_name.into(),
            dims: model.dims,
            mixer_input: Some(model.mixer.input),
            networks,
            config: config.clone(),
        }
    }

    pub fn from_policy(policy: &DecentralizedPolicy, env_name: &str, dims: Dims, config: &TrainConfig) -> Self {
        let networks = policy
            .networks()
            .iter()
            .enumerate()
            .map(|(i, net)| (format!("pi_{i}"), net.clone()))
            .collect();
        Self {
            format_version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Bc,
            env_name: env_name.into(),
            dims,
            mixer_input: None,
            networks,
            config: config.clone(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.kind != CheckpointKind::Omiga {
            return Err(Error::Compatibility("behavior-cloning checkpoints have no value networks".into()));
        }
        let n = self.dims.n_agents;
        let get_all = |prefix: &str| (0..n).map(|i| take(&self.networks, &format!("{prefix}_{i}"))).collect::<Result<Vec<_>>>();
        let input = self.mixer_input.unwrap_or(Variant::Full.weight_input());
        let mixer = Mixer::from_parts(
            take(&self.networks, "mixer_w")?,
            take(&self.networks, "mixer_b")?,
            input,
            n,
            self.dims.obs_dim,
        )?;
        Ok(Model {
            dims: self.dims,
            q: get_all("q")?,
            q_target: get_all("q_target")?,
            v: get_all("v")?,
            pi: get_all("pi")?,
            mixer,
        })
    }

    pub fn policy(&self) -> Result<DecentralizedPolicy> {
        let pis = (0..self.dims.n_agents)
            .map(|i| take(&self.networks, &format!("pi_{i}")))
            .collect::<Result<Vec<_>>>()?;
        for (i, pi) in pis.iter().enumerate() {
            if pi.input_dim() != self.dims.obs_dim || pi.output_dim() != self.dims.n_actions {
                return Err(Error::Compatibility(format!(
                    "pi_{i} is {}→{}, checkpoint dims say {}→{}",
                    pi.input_dim(),
                    pi.output_dim(),
                    self.dims.obs_dim,
                    self.dims.n_actions
                )));
            }
        }
        Ok(DecentralizedPolicy::new(pis))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string(self).map_err(|e| Error::Input(format!("checkpoint serialization: {e}")))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ckpt.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(ckpt)
    }
}
