//! In-sample offline training with a decomposed, behavior-regularized
//! value function.
//!
//! Each step samples one batch and then, in order: fits the local V networks
//! (using target Q), fits the local Q networks together with the mixer,
//! fits the policies by exponentially weighted likelihood, and moves the
//! target Q networks toward the online ones.

mod config;
mod losses;
mod model;
mod policy;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use config::{ablation_variant, EvalMode, TrainConfig, Variant, DEFAULT_EVAL_EPISODES};
pub use losses::{log_softmax, policy_loss, q_inputs, q_loss, v_loss, PolicyLossOutput, QLossOutput, VLossOutput};
pub use model::{Checkpoint, CheckpointKind, Dims, Model, CHECKPOINT_VERSION};
pub use policy::{evaluate, DecentralizedPolicy, Stats};

use ndarray::Array1;

use crate::approximator::{Adam, AdamConfig};
use crate::dataset::Dataset;
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::rng::substream;

pub const METRICS_HEADER: &str = "step,v_loss,q_loss,pi_loss,mean_w,eval_return";

/// One metrics row. Columns a trainer does not compute are left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub v_loss: Option<f64>,
    pub q_loss: Option<f64>,
    pub pi_loss: f64,
    pub mean_w: Option<f64>,
    pub eval_return: f64,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// CSV text with [`METRICS_HEADER`] and one line per row.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            cell(r.v_loss),
            cell(r.q_loss),
            r.pi_loss,
            cell(r.mean_w),
            r.eval_return
        );
    }
    out
}

/// Reads the `step` and `eval_return` columns back from a metrics file.
pub fn read_eval_returns(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            message: format!("expected header {METRICS_HEADER:?}"),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |message: String| Error::Parse {
                path: path.to_owned(),
                line: k + 2,
                message,
            };
            if fields.len() != 6 {
                return Err(bad(format!("{} columns, expected 6", fields.len())));
            }
            let step = fields[0].parse().map_err(|e| bad(format!("step: {e}")))?;
            let ret = fields[5].parse().map_err(|e| bad(format!("eval_return: {e}")))?;
            Ok((step, ret))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

fn dims_of(dataset: &Dataset) -> Dims {
    Dims {
        n_agents: dataset.manifest.n_agents,
        obs_dim: dataset.manifest.obs_dim,
        n_actions: dataset.manifest.action_count,
    }
}

fn check_env(dataset: &Dataset, env: &Env) -> Result<()> {
    let m = &dataset.manifest;
    if m.env_name != env.name() || m.n_agents != env.n_agents() || m.obs_dim != env.obs_dim() || m.action_count != env.n_actions() {
        return Err(Error::Compatibility(format!(
            "dataset is for {} ({} agents, obs {}, {} actions); evaluation env is {} ({} agents, obs {}, {} actions)",
            m.env_name,
            m.n_agents,
            m.obs_dim,
            m.action_count,
            env.name(),
            env.n_agents(),
            env.obs_dim(),
            env.n_actions()
        )));
    }
    Ok(())
}

fn is_report_step(step: usize, total: usize, interval: usize) -> bool {
    step % interval == 0 || step == total
}

/// Runs `config.steps` training iterations.
pub fn train(dataset: &Dataset, env: &Env, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    check_env(dataset, env)?;
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let mut model = Model::new(dims_of(dataset), config, &mut substream(config.seed, "init"))?;
    let adam = |lr: f64, net: &crate::approximator::Mlp| Adam::new(net, AdamConfig::with_lr(lr));
    let mut opt_q = model.q.iter().map(|n| adam(config.lr_q, n)).collect::<Result<Vec<_>>>()?;
    let mut opt_v = model.v.iter().map(|n| adam(config.lr_v, n)).collect::<Result<Vec<_>>>()?;
    let mut opt_pi = model.pi.iter().map(|n| adam(config.lr_pi, n)).collect::<Result<Vec<_>>>()?;
    let mut opt_w = adam(config.lr_mixer, &model.mixer.w_net)?;
    let mut opt_b = adam(config.lr_mixer, &model.mixer.b_net)?;

    let mut batch_rng = substream(config.seed, "batch");
    let mut metrics = Vec::new();
    for step in 1..=config.steps {
        let batch = dataset.sample_batch(config.batch_size.min(dataset.len()), &mut batch_rng)?;

        let v_out = v_loss(&batch, &model, config)?;
        for ((net, opt), g) in model.v.iter_mut().zip(&mut opt_v).zip(&v_out.v_grads) {
            opt.step(net, g)?;
        }

        let q_out = q_loss(&batch, &model, config)?;
        for ((net, opt), g) in model.q.iter_mut().zip(&mut opt_q).zip(&q_out.q_grads) {
            opt.step(net, g)?;
        }
        opt_w.step(&mut model.mixer.w_net, &q_out.w_grads)?;
        opt_b.step(&mut model.mixer.b_net, &q_out.b_grads)?;

        let pi_out = policy_loss(&batch, &model, config)?;
        for ((net, opt), g) in model.pi.iter_mut().zip(&mut opt_pi).zip(&pi_out.pi_grads) {
            opt.step(net, g)?;
        }

        for (target, online) in model.q_target.iter_mut().zip(&model.q) {
            target.soft_update(online, config.tau)?;
        }

        if is_report_step(step, config.steps, config.eval_interval) {
            let eval = evaluate(&model.policy(), env, config.eval_episodes, config.seed, config.eval_mode)?;
            metrics.push(MetricsRow {
                step,
                v_loss: Some(v_out.loss),
                q_loss: Some(q_out.loss),
                pi_loss: pi_out.loss,
                mean_w: Some(v_out.mean_w),
                eval_return: eval.mean,
            });
        }
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint::from_model(&model, env.name(), config),
        metrics,
    })
}

/// Maximum-likelihood baseline with the same policy architecture.
pub fn bc_train(dataset: &Dataset, env: &Env, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    check_env(dataset, env)?;
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let dims = dims_of(dataset);
    let mut rng = substream(config.seed, "init");
    let mut pis = (0..dims.n_agents)
        .map(|_| crate::approximator::Mlp::new(dims.obs_dim, &config.hidden, dims.n_actions, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut opts = pis
        .iter()
        .map(|n| Adam::new(n, AdamConfig::with_lr(config.lr_pi)))
        .collect::<Result<Vec<_>>>()?;
    let mut batch_rng = substream(config.seed, "batch");
    let mut metrics = Vec::new();
    for step in 1..=config.steps {
        let batch = dataset.sample_batch(config.batch_size.min(dataset.len()), &mut batch_rng)?;
        let ones = Array1::ones(batch.len());
        let scale = 1.0 / (batch.len() * dims.n_agents) as f64;
        let mut loss = 0.0;
        for (i, (net, opt)) in pis.iter_mut().zip(&mut opts).enumerate() {
            let (l, g) = losses::weighted_nll(net, batch.obs[i].view(), &batch.actions[i], &ones, scale)?;
            loss += l;
            opt.step(net, &g)?;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("behavior-cloning loss is {loss} at step {step}")));
        }
        if is_report_step(step, config.steps, config.eval_interval) {
            let policy = DecentralizedPolicy::new(pis.clone());
            let eval = evaluate(&policy, env, config.eval_episodes, config.seed, config.eval_mode)?;
            metrics.push(MetricsRow {
                step,
                v_loss: None,
                q_loss: None,
                pi_loss: loss,
                mean_w: None,
                eval_return: eval.mean,
            });
        }
    }
    let policy = DecentralizedPolicy::new(pis);
    Ok(TrainOutput {
        checkpoint: Checkpoint::from_policy(&policy, env.name(), dims, config),
        metrics,
    })
}

/// Writes `checkpoint.json` and `metrics.csv` into `dir`.
pub fn save_run(output: &TrainOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    output.checkpoint.save(dir.join("checkpoint.json"))?;
    let path = dir.join("metrics.csv");
    fs::write(&path, metrics_csv(&output.metrics)).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_steps_count() {
        for (steps, k) in [(10, 3), (9, 3), (1, 5), (0, 4), (20_000, 1000)] {
            let rows = (1..=steps).filter(|&s| is_report_step(s, steps, k)).count();
            assert_eq!(rows, steps.div_ceil(k));
        }
    }

    #[test]
    fn csv_layout() {
        let rows = [MetricsRow {
            step: 5,
            v_loss: None,
            q_loss: Some(0.5),
            pi_loss: 1.25,
            mean_w: None,
            eval_return: 2.0,
        }];
        assert_eq!(metrics_csv(&rows), "step,v_loss,q_loss,pi_loss,mean_w,eval_return\n5,,0.5,1.25,,2\n");
    }
}
