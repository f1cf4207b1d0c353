//! Linear value decomposition with a shared state-dependent weight:
//! `Q_tot = sum_i w_i(o) Q_i + b(o)` and `V_tot = sum_i w_i(o) V_i + b(o)`.
//!
//! The w-network produces one raw output per agent and `w_i = |raw_i|`. In
//! the default (global) mode it reads the concatenated joint observation. In
//! local mode the same network is applied to each `o_i` separately and agent
//! `i` keeps output `i`, so its input width is a single agent's `obs_dim`.
//! The b-network always reads the joint observation.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::approximator::{Mlp, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// How the w-network sees the observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInput {
    Joint,
    Local,
}

/// Non-negativity transform applied to raw w outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Abs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    pub w_net: Mlp,
    pub b_net: Mlp,
    pub input: WeightInput,
    pub transform: Transform,
    n_agents: usize,
    obs_dim: usize,
}

/// Mixer outputs for a batch plus what is needed to backpropagate into the
/// w- and b-networks.
#[derive(Debug, Clone)]
pub struct MixerForward {
    /// `batch × n_agents`, all entries `>= 0`.
    pub w: Array2<f64>,
    /// One offset per row.
    pub b: Array1<f64>,
    raw: Array2<f64>,
    w_tapes: Vec<Tape>,
    b_tape: Tape,
}

fn joint_matrix(agent_obs: &[ArrayView2<'_, f64>]) -> Result<Array2<f64>> {
    concatenate(Axis(1), agent_obs).map_err(|e| Error::Shape(format!("joint observation: {e}")))
}

impl Mixer {
    pub fn new(
        n_agents: usize,
        obs_dim: usize,
        hidden: &[usize],
        input: WeightInput,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w_in = match input {
            WeightInput::Joint => n_agents * obs_dim,
            WeightInput::Local => obs_dim,
        };
        let w_net = Mlp::new(w_in, hidden, n_agents, rng)?;
        let b_net = Mlp::new(n_agents * obs_dim, hidden, 1, rng)?;
        Self::from_parts(w_net, b_net, input, n_agents, obs_dim)
    }

    pub fn from_parts(
        w_net: Mlp,
        b_net: Mlp,
        input: WeightInput,
        n_agents: usize,
        obs_dim: usize,
    ) -> Result<Self> {
        let w_in = match input {
            WeightInput::Joint => n_agents * obs_dim,
            WeightInput::Local => obs_dim,
        };
        if w_net.input_dim() != w_in || w_net.output_dim() != n_agents {
            return Err(Error::Shape(format!(
                "w-network is {}→{}, expected {w_in}→{n_agents}",
                w_net.input_dim(),
                w_net.output_dim()
            )));
        }
        if b_net.input_dim() != n_agents * obs_dim || b_net.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "b-network is {}→{}, expected {}→1",
                b_net.input_dim(),
                b_net.output_dim(),
                n_agents * obs_dim
            )));
        }
        Ok(Self {
            w_net,
            b_net,
            input,
            transform: Transform::Abs,
            n_agents,
            obs_dim,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn check_obs(&self, agent_obs: &[ArrayView2<'_, f64>]) -> Result<usize> {
        if agent_obs.len() != self.n_agents {
            return Err(Error::Shape(format!(
                "{} observation blocks for {} agents",
                agent_obs.len(),
                self.n_agents
            )));
        }
        let rows = agent_obs[0].nrows();
        for (i, o) in agent_obs.iter().enumerate() {
            if o.ncols() != self.obs_dim || o.nrows() != rows {
                return Err(Error::Shape(format!(
                    "agent {i} observations are {:?}, expected ({rows}, {})",
                    o.dim(),
                    self.obs_dim
                )));
            }
        }
        Ok(rows)
    }

    /// Evaluates `w` and `b` once for every row of the batch.
    pub fn forward(&self, agent_obs: &[ArrayView2<'_, f64>]) -> Result<MixerForward> {
        let rows = self.check_obs(agent_obs)?;
        let joint = joint_matrix(agent_obs)?;
        let (raw, w_tapes) = match self.input {
            WeightInput::Joint => {
                let (raw, tape) = self.w_net.forward_batch(joint.view())?;
                (raw, vec![tape])
            }
            WeightInput::Local => {
                let mut raw = Array2::zeros((rows, self.n_agents));
                let mut tapes = Vec::with_capacity(self.n_agents);
                for (i, o) in agent_obs.iter().enumerate() {
                    let (out, tape) = self.w_net.forward_batch(o.view())?;
                    raw.column_mut(i).assign(&out.column(i));
                    tapes.push(tape);
                }
                (raw, tapes)
            }
        };
        let (b_out, b_tape) = self.b_net.forward_batch(joint.view())?;
        let w = raw.mapv(f64::abs);
        Ok(MixerForward {
            w,
            b: b_out.column(0).to_owned(),
            raw,
            w_tapes,
            b_tape,
        })
    }

    /// Weights for a single joint observation.
    pub fn weights(&self, agent_obs: &[&[f64]]) -> Result<(Vec<f64>, f64)> {
        let views = agent_obs
            .iter()
            .map(|o| ArrayView2::from_shape((1, o.len()), o).map_err(|e| Error::Shape(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let fwd = self.forward(&views)?;
        Ok((fwd.w.row(0).to_vec(), fwd.b[0]))
    }

    /// Backpropagates `dL/dw` (`batch × n`) and `dL/db` (`batch`) into the
    /// w- and b-network parameters.
    pub fn backward(&self, fwd: &MixerForward, dw: ArrayView2<'_, f64>, db: &Array1<f64>) -> Result<(Mlp, Mlp)> {
        if dw.dim() != fwd.w.dim() || db.len() != fwd.b.len() {
            return Err(Error::Shape("mixer upstream does not match the forward pass".into()));
        }
        let mut draw = dw.to_owned();
        draw.zip_mut_with(&fwd.raw, |d, &r| *d *= sign(r));
        let w_grads = match self.input {
            WeightInput::Joint => self.w_net.backward(&fwd.w_tapes[0], draw.view())?,
            WeightInput::Local => {
                let mut total = self.w_net.zeros_like();
                for (i, tape) in fwd.w_tapes.iter().enumerate() {
                    let mut up = Array2::zeros(draw.dim());
                    up.column_mut(i).assign(&draw.column(i));
                    total.add_scaled(&self.w_net.backward(tape, up.view())?, 1.0)?;
                }
                total
            }
        };
        let db = db.view().insert_axis(Axis(1));
        let b_grads = self.b_net.backward(&fwd.b_tape, db)?;
        Ok((w_grads, b_grads))
    }
}

/// Subgradient of `|x|`, zero at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mix(w: &[f64], b: f64, locals: &[f64]) -> Result<f64> {
    if w.len() != locals.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} local values",
            w.len(),
            locals.len()
        )));
    }
    Ok(w.iter().zip(locals).map(|(w, x)| w * x).sum::<f64>() + b)
}

/// `sum_i w_i Q_i + b`.
pub fn mix_q(w: &[f64], b: f64, local_qs: &[f64]) -> Result<f64> {
    mix(w, b, local_qs)
}

/// `sum_i w_i V_i + b`; identical arithmetic to [`mix_q`].
pub fn mix_v(w: &[f64], b: f64, local_vs: &[f64]) -> Result<f64> {
    mix(w, b, local_vs)
}
