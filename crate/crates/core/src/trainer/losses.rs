//! The three in-sample objectives.
//!
//! Each function returns gradients only for the networks its objective is
//! allowed to move, so the gradient-flow contract is enforced by the
//! return types. Every Q evaluation goes through [`q_inputs`], which
//! encodes the batch's own actions and nothing else.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::config::TrainConfig;
use super::model::Model;
use crate::approximator::Mlp;
use crate::dataset::Batch;
use crate::error::{Error, Result};

/// `[o_i, one_hot(a_i)]` for every row.
pub fn q_inputs(obs: ArrayView2<'_, f64>, actions: &[usize], n_actions: usize) -> Result<Array2<f64>> {
    if actions.len() != obs.nrows() {
        return Err(Error::Shape(format!(
            "{} actions for {} observation rows",
            actions.len(),
            obs.nrows()
        )));
    }
    let d = obs.ncols();
    let mut x = Array2::zeros((obs.nrows(), d + n_actions));
    for (row, (&a, o)) in actions.iter().zip(obs.rows()).enumerate() {
        if a >= n_actions {
            return Err(Error::Shape(format!("action {a} out of range for {n_actions} actions")));
        }
        x.row_mut(row).slice_mut(ndarray::s![..d]).assign(&o);
        x[[row, d + a]] = 1.0;
    }
    Ok(x)
}

fn column(m: Array2<f64>) -> Array1<f64> {
    m.index_axis_move(Axis(1), 0)
}

fn upstream(col: Array1<f64>) -> Array2<f64> {
    col.insert_axis(Axis(1))
}

fn check_batch(batch: &Batch, model: &Model) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    if batch.n_agents() != model.n_agents() {
        return Err(Error::Shape(format!(
            "batch has {} agents, model has {}",
            batch.n_agents(),
            model.n_agents()
        )));
    }
    Ok(())
}

fn finite_or(loss: f64, what: &str, detail: impl FnOnce() -> String) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("{what} is {loss}; {}", detail())))
    }
}

/// Stop-gradient mixer weights used by the V and policy objectives:
/// the learned `w` or all ones for the `no_w` ablation.
fn fixed_weights(batch: &Batch, model: &Model, config: &TrainConfig) -> Result<Array2<f64>> {
    if config.variant.uses_mixer_weights() {
        let views: Vec<_> = batch.obs.iter().map(|o| o.view()).collect();
        Ok(model.mixer.forward(&views)?.w)
    } else {
        Ok(Array2::ones((batch.len(), model.n_agents())))
    }
}

#[derive(Debug, Clone)]
pub struct VLossOutput {
    pub loss: f64,
    pub v_grads: Vec<Mlp>,
    /// Mean of the learned mixer weights over the batch and agents.
    pub mean_w: f64,
}

/// `mean exp(min(w (Qbar - V) / alpha, C)) + w V / alpha` using the target
/// Q networks.
pub fn v_loss(batch: &Batch, model: &Model, config: &TrainConfig) -> Result<VLossOutput> {
    check_batch(batch, model)?;
    let n = model.n_agents();
    let scale = 1.0 / (batch.len() * n) as f64;
    let w = fixed_weights(batch, model, config)?;
    let mean_w = if config.variant.uses_mixer_weights() {
        w.mean().unwrap_or(0.0)
    } else {
        let views: Vec<_> = batch.obs.iter().map(|o| o.view()).collect();
        model.mixer.forward(&views)?.w.mean().unwrap_or(0.0)
    };
    let alpha = config.alpha;
    let mut loss = 0.0;
    let mut worst = f64::NEG_INFINITY;
    let mut v_grads = Vec::with_capacity(n);
    for i in 0..n {
        let x = q_inputs(batch.obs[i].view(), &batch.actions[i], model.n_actions())?;
        let q_bar = column(model.q_target[i].predict_batch(x.view())?);
        let (v_out, tape) = model.v[i].forward_batch(batch.obs[i].view())?;
        let v = column(v_out);
        let wi = w.column(i);
        let mut dv = Array1::zeros(batch.len());
        for r in 0..batch.len() {
            let z = wi[r] * (q_bar[r] - v[r]) / alpha;
            worst = worst.max(z);
            let e = z.min(config.exp_clamp).exp();
            loss += e + wi[r] * v[r] / alpha;
            let de = if z < config.exp_clamp { e } else { 0.0 };
            dv[r] = scale * wi[r] / alpha * (1.0 - de);
        }
        v_grads.push(model.v[i].backward(&tape, upstream(dv).view())?);
    }
    let loss = finite_or(loss * scale, "V loss", || format!("largest exponent {worst}"))?;
    Ok(VLossOutput {
        loss,
        v_grads,
        mean_w,
    })
}

#[derive(Debug, Clone)]
pub struct QLossOutput {
    pub loss: f64,
    pub q_grads: Vec<Mlp>,
    pub w_grads: Mlp,
    pub b_grads: Mlp,
}

/// `mean (r + gamma (1 - done) V_tot(o') - Q_tot(o, a))^2`, with the local V
/// values held fixed.
pub fn q_loss(batch: &Batch, model: &Model, config: &TrainConfig) -> Result<QLossOutput> {
    check_batch(batch, model)?;
    let n = model.n_agents();
    let b = batch.len();
    let obs: Vec<_> = batch.obs.iter().map(|o| o.view()).collect();
    let next: Vec<_> = batch.next_obs.iter().map(|o| o.view()).collect();
    let mix_now = model.mixer.forward(&obs)?;
    let mix_next = model.mixer.forward(&next)?;

    let mut q_cols = Array2::zeros((b, n));
    let mut v_next = Array2::zeros((b, n));
    let mut tapes = Vec::with_capacity(n);
    for i in 0..n {
        let x = q_inputs(obs[i], &batch.actions[i], model.n_actions())?;
        let (q, tape) = model.q[i].forward_batch(x.view())?;
        q_cols.column_mut(i).assign(&q.column(0));
        tapes.push(tape);
        v_next.column_mut(i).assign(&model.v[i].predict_batch(next[i])?.column(0));
    }
    let q_tot = (&mix_now.w * &q_cols).sum_axis(Axis(1)) + &mix_now.b;
    let v_tot_next = (&mix_next.w * &v_next).sum_axis(Axis(1)) + &mix_next.b;
    let bootstrap = (1.0 - &batch.dones) * config.gamma;
    let delta = &batch.rewards + &(&bootstrap * &v_tot_next) - &q_tot;
    let loss = finite_or(delta.mapv(|d| d * d).mean().unwrap_or(0.0), "Q loss", || {
        format!("largest |TD error| {}", delta.iter().fold(0.0f64, |m, d| m.max(d.abs())))
    })?;

    // dL/dQ_tot per row.
    let g = delta.mapv(|d| -2.0 * d / b as f64);
    let mut q_grads = Vec::with_capacity(n);
    for (i, tape) in tapes.iter().enumerate() {
        let dq = &g * &mix_now.w.column(i);
        q_grads.push(model.q[i].backward(tape, upstream(dq).view())?);
    }
    let dw_now = &q_cols * &g.view().insert_axis(Axis(1));
    let (mut w_grads, mut b_grads) = model.mixer.backward(&mix_now, dw_now.view(), &g)?;
    let g_next = -&g * &bootstrap;
    let dw_next = &v_next * &g_next.view().insert_axis(Axis(1));
    let (w_next, b_next) = model.mixer.backward(&mix_next, dw_next.view(), &g_next)?;
    w_grads.add_scaled(&w_next, 1.0)?;
    b_grads.add_scaled(&b_next, 1.0)?;
    Ok(QLossOutput {
        loss,
        q_grads,
        w_grads,
        b_grads,
    })
}

#[derive(Debug, Clone)]
pub struct PolicyLossOutput {
    pub loss: f64,
    pub pi_grads: Vec<Mlp>,
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// `-mean weight * log pi_i(a_i | o_i)` for one agent's network, with
/// `weights` treated as constants. `scale` divides the sum.
pub(crate) fn weighted_nll(
    pi: &Mlp,
    obs: ArrayView2<'_, f64>,
    actions: &[usize],
    weights: &Array1<f64>,
    scale: f64,
) -> Result<(f64, Mlp)> {
    let (logits, tape) = pi.forward_batch(obs)?;
    let logp = log_softmax(&logits);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (r, &a) in actions.iter().enumerate() {
        if a >= logits.ncols() {
            return Err(Error::Shape(format!("action {a} out of range for {} logits", logits.ncols())));
        }
        loss -= weights[r] * logp[[r, a]];
        grad[[r, a]] -= 1.0;
        grad.row_mut(r).mapv_inplace(|g| g * weights[r] * scale);
    }
    Ok((loss * scale, pi.backward(&tape, grad.view())?))
}

/// Exponentially weighted log-likelihood of the dataset actions, weights
/// `min(exp(w (Q - V) / alpha), W_max)` from the online Q and V networks.
pub fn policy_loss(batch: &Batch, model: &Model, config: &TrainConfig) -> Result<PolicyLossOutput> {
    check_batch(batch, model)?;
    let n = model.n_agents();
    let scale = 1.0 / (batch.len() * n) as f64;
    let w = fixed_weights(batch, model, config)?;
    let mut loss = 0.0;
    let mut pi_grads = Vec::with_capacity(n);
    for i in 0..n {
        let x = q_inputs(batch.obs[i].view(), &batch.actions[i], model.n_actions())?;
        let q = column(model.q[i].predict_batch(x.view())?);
        let v = column(model.v[i].predict_batch(batch.obs[i].view())?);
        let weights = ndarray::Zip::from(&q)
            .and(&v)
            .and(w.column(i))
            .map_collect(|&q, &v, &wi| {
                let z = (wi * (q - v) / config.alpha).min(config.exp_clamp);
                z.exp().min(config.weight_clamp)
            });
        let (l, g) = weighted_nll(&model.pi[i], batch.obs[i].view(), &batch.actions[i], &weights, scale)?;
        loss += l;
        pi_grads.push(g);
    }
    let loss = finite_or(loss, "policy loss", || "non-finite log-probability".into())?;
    Ok(PolicyLossOutput { loss, pi_grads })
}
