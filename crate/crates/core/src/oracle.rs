//! Exact solver for the behavior-regularized multi-agent MDP with a
//! reverse-KL penalty `alpha * log(pi_tot / mu_tot)`.
//!
//! The optimal backup has the closed form
//!
//! ```text
//! V'(s) = alpha * log E_{a ~ mu_tot(.|s)} exp((r(s,a) + gamma * E[V(s')]) / alpha)
//! ```
//!
//! which is a gamma-contraction in the sup norm. At its fixed point
//! `V* = u* + alpha` and `pi*_tot = mu_tot * exp((Q* - V*) / alpha)`.
//! Terminal states are absorbing with value 0. Every log-mean-exp is
//! evaluated with max subtraction.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::envs::{JointPolicy, TabularMdp};
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100_000;
const JOINT_ACTION_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub v: Vec<f64>,
    /// `[s][joint_a]`, flattened.
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    pub policy: JointPolicy,
    pub alpha: f64,
    pub gamma: f64,
    pub iterations: usize,
    /// `||T V* - V*||_inf` at the returned values.
    pub residual: f64,
}

impl OracleSolution {
    pub fn q_row(&self, s: usize) -> &[f64] {
        let na = self.policy.n_joint_actions;
        &self.q[s * na..(s + 1) * na]
    }

    /// Value under the initial-state distribution.
    pub fn initial_value(&self, mdp: &TabularMdp) -> f64 {
        mdp.initial.iter().zip(&self.v).map(|(p, v)| p * v).sum()
    }

    pub fn report(&self) -> OracleReport {
        OracleReport {
            v_star: self.v.clone(),
            u_star: self.u.clone(),
            pi_star: (0..self.policy.n_states)
                .map(|s| self.policy.row(s).to_vec())
                .collect(),
            alpha: self.alpha,
            gamma: self.gamma,
            iterations: self.iterations,
            residual: self.residual,
        }
    }
}

/// JSON form emitted by `oracle-solve`.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    #[serde(rename = "V_star")]
    pub v_star: Vec<f64>,
    pub u_star: Vec<f64>,
    pub pi_star: Vec<Vec<f64>>,
    pub alpha: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub residual: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("alpha must be positive, got {alpha}")))
    }
}

fn check_inputs(mdp: &TabularMdp, mu: &JointPolicy) -> Result<()> {
    if mdp.n_joint_actions() > JOINT_ACTION_CAP {
        return Err(Error::Unsupported(format!(
            "{} joint actions exceeds the oracle cap of {JOINT_ACTION_CAP}",
            mdp.n_joint_actions()
        )));
    }
    if mu.n_states != mdp.n_states || mu.n_joint_actions != mdp.n_joint_actions() {
        return Err(Error::Shape("behavior policy does not match the MDP".into()));
    }
    mu.check_normalized(1e-9)
}

/// `log sum_k exp(x_k)` with max subtraction; `-inf` entries are skipped.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// One-step lookahead `r(s,a) + gamma * E[V(s')]` for every joint action.
fn lookahead(mdp: &TabularMdp, s: usize, v: &[f64]) -> Vec<f64> {
    (0..mdp.n_joint_actions())
        .map(|a| mdp.reward(s, a) + mdp.gamma * mdp.expected_next(s, a, v))
        .collect()
}

fn backup(v: &[f64], mdp: &TabularMdp, mu: &JointPolicy, alpha: f64) -> Vec<f64> {
    (0..mdp.n_states)
        .map(|s| {
            if mdp.terminal[s] {
                return 0.0;
            }
            let q = lookahead(mdp, s, v);
            let terms = mu
                .row(s)
                .iter()
                .zip(&q)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| p.ln() + q / alpha);
            alpha * log_sum_exp(terms)
        })
        .collect()
}

/// The optimal regularized backup applied once to `v`.
pub fn apply_optimal_operator(
    v: &[f64],
    mdp: &TabularMdp,
    mu: &JointPolicy,
    alpha: f64,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_inputs(mdp, mu)?;
    if v.len() != mdp.n_states {
        return Err(Error::Shape(format!("value vector has {} entries, MDP has {} states", v.len(), mdp.n_states)));
    }
    Ok(backup(v, mdp, mu, alpha))
}

/// Fixed-point iteration of the optimal backup until the sup-norm change
/// drops below `tol`.
pub fn solve(mdp: &TabularMdp, mu: &JointPolicy, alpha: f64, tol: f64) -> Result<OracleSolution> {
    check_alpha(alpha)?;
    check_inputs(mdp, mu)?;
    if !(tol > 0.0) {
        return Err(Error::Param(format!("tolerance must be positive, got {tol}")));
    }
    if !(0.0..1.0).contains(&mdp.gamma) {
        return Err(Error::Param(format!("gamma {} outside [0, 1)", mdp.gamma)));
    }
    let mut v = vec![0.0; mdp.n_states];
    let mut iterations = 0;
    loop {
        let next = backup(&v, mdp, mu, alpha);
        let change = crate::envs::sup_distance(&next, &v);
        v = next;
        iterations += 1;
        if change < tol {
            break;
        }
        if iterations >= MAX_ITERATIONS {
            return Err(Error::Convergence {
                iterations,
                residual: change,
            });
        }
    }
    let residual = crate::envs::sup_distance(&backup(&v, mdp, mu, alpha), &v);
    let q: Vec<f64> = (0..mdp.n_states)
        .flat_map(|s| {
            if mdp.terminal[s] {
                vec![0.0; mdp.n_joint_actions()]
            } else {
                lookahead(mdp, s, &v)
            }
        })
        .collect();
    let policy = optimal_policy(&q, &v, mu, alpha)?;
    let u = v.iter().map(|x| x - alpha).collect();
    Ok(OracleSolution {
        v,
        q,
        u,
        policy,
        alpha,
        gamma: mdp.gamma,
        iterations,
        residual,
    })
}

/// `pi(a|s) = mu(a|s) * exp((Q(s,a) - V(s)) / alpha)`; rows must already be
/// normalized to within 1e-6, otherwise the inputs were not converged.
pub fn optimal_policy(q: &[f64], v: &[f64], mu: &JointPolicy, alpha: f64) -> Result<JointPolicy> {
    check_alpha(alpha)?;
    let na = mu.n_joint_actions;
    if q.len() != mu.n_states * na || v.len() != mu.n_states {
        return Err(Error::Shape("Q/V tables do not match the behavior policy".into()));
    }
    let mut probs = Vec::with_capacity(q.len());
    for s in 0..mu.n_states {
        let row: Vec<f64> = mu
            .row(s)
            .iter()
            .zip(&q[s * na..(s + 1) * na])
            .map(|(&m, &qa)| if m > 0.0 { m * ((qa - v[s]) / alpha).exp() } else { 0.0 })
            .collect();
        let total: f64 = row.iter().sum();
        let is_terminal_row = q[s * na..(s + 1) * na].iter().all(|&x| x == 0.0) && v[s] == 0.0;
        if (total - 1.0).abs() > 1e-6 && !is_terminal_row {
            return Err(Error::Consistency(format!(
                "policy row for state {s} sums to {total}; Q and V are not a converged pair"
            )));
        }
        probs.extend(row);
    }
    Ok(JointPolicy {
        n_states: mu.n_states,
        n_joint_actions: na,
        probs,
    })
}

fn check_local(w: f64, alpha: f64, q: &[f64], mu: &[f64]) -> Result<()> {
    check_alpha(alpha)?;
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Param(format!("mixing weight must be finite and >= 0, got {w}")));
    }
    if q.len() != mu.len() || q.is_empty() {
        return Err(Error::Shape("local Q values and probabilities differ in length".into()));
    }
    let total: f64 = mu.iter().sum();
    if mu.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("local behavior probabilities sum to {total}")));
    }
    Ok(())
}

/// Minimizer over `V` of `E_mu[exp(w (Q - V) / alpha) + w V / alpha]`:
/// `V = (alpha / w) * log E_mu[exp(w Q / alpha)]`, or `E_mu[Q]` when `w = 0`.
pub fn local_v_solve(w: f64, alpha: f64, q: &[f64], mu: &[f64]) -> Result<f64> {
    check_local(w, alpha, q, mu)?;
    if w == 0.0 {
        return Ok(q.iter().zip(mu).map(|(q, p)| q * p).sum());
    }
    let terms = q
        .iter()
        .zip(mu)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&q, &p)| p.ln() + w * q / alpha);
    Ok(alpha / w * log_sum_exp(terms))
}

/// The convex local value objective minimized by [`local_v_solve`].
pub fn local_v_objective(v: f64, w: f64, alpha: f64, q: &[f64], mu: &[f64]) -> f64 {
    q.iter()
        .zip(mu)
        .map(|(&q, &p)| p * ((w * (q - v) / alpha).exp() + w * v / alpha))
        .sum()
}

/// `E_mu[exp(w (Q - V) / alpha)] - 1`, zero at the optimal local value.
pub fn self_normalization_residual(v: f64, w: f64, alpha: f64, q: &[f64], mu: &[f64]) -> f64 {
    q.iter()
        .zip(mu)
        .map(|(&q, &p)| p * (w * (q - v) / alpha).exp())
        .sum::<f64>()
        - 1.0
}

/// Local quantities of every agent at one joint observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFactors {
    /// `q[i][a_i]`.
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
    /// `mu[i][a_i]`.
    pub mu: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionReport {
    /// Max over observations of `|sum_a prod_i pi_i(a_i) - 1|`.
    pub normalization_residual: f64,
    /// Max elementwise gap between `prod_i pi_i` and
    /// `mu_tot * exp((Q_tot - V_tot) / alpha)`.
    pub product_gap: f64,
}

/// Brute-force check that local closed-form policies multiply into the
/// global one and stay normalized.
pub fn check_decomposition(factors: &[LocalFactors], alpha: f64) -> Result<DecompositionReport> {
    check_alpha(alpha)?;
    let mut report = DecompositionReport {
        normalization_residual: 0.0,
        product_gap: 0.0,
    };
    for (k, f) in factors.iter().enumerate() {
        let n = f.q.len();
        if n == 0 || f.v.len() != n || f.w.len() != n || f.mu.len() != n {
            return Err(Error::Shape(format!("factor set {k} has inconsistent agent counts")));
        }
        let na = f.q[0].len();
        if f.q.iter().chain(&f.mu).any(|row| row.len() != na) {
            return Err(Error::Shape(format!("factor set {k} has ragged action rows")));
        }
        let joint = na
            .checked_pow(n as u32)
            .filter(|&j| j <= JOINT_ACTION_CAP)
            .ok_or_else(|| Error::Unsupported("joint action space too large".into()))?;
        for i in 0..n {
            check_local(f.w[i], alpha, &f.q[i], &f.mu[i])?;
            let r = self_normalization_residual(f.v[i], f.w[i], alpha, &f.q[i], &f.mu[i]);
            if r.abs() > 1e-6 {
                return Err(Error::Precondition(format!(
                    "agent {i} in factor set {k} violates self-normalization by {r:e}"
                )));
            }
        }
        let v_tot: f64 = f.w.iter().zip(&f.v).map(|(w, v)| w * v).sum::<f64>() + f.b;
        let mut total = 0.0;
        for j in 0..joint {
            let actions = crate::envs::decode_joint(j, n, na);
            let product: f64 = (0..n)
                .map(|i| {
                    let a = actions[i];
                    f.mu[i][a] * (f.w[i] * (f.q[i][a] - f.v[i]) / alpha).exp()
                })
                .product();
            let mu_tot: f64 = (0..n).map(|i| f.mu[i][actions[i]]).product();
            let q_tot: f64 = (0..n).map(|i| f.w[i] * f.q[i][actions[i]]).sum::<f64>() + f.b;
            let global = mu_tot * ((q_tot - v_tot) / alpha).exp();
            report.product_gap = report.product_gap.max((product - global).abs());
            total += product;
        }
        report.normalization_residual = report.normalization_residual.max((total - 1.0).abs());
    }
    if report.product_gap > 1e-10 {
        return Err(Error::Consistency(format!(
            "product of local policies deviates from the global policy by {:e}",
            report.product_gap
        )));
    }
    Ok(report)
}

/// Per-state `E_pi[log pi - log mu]`. Requires `pi << mu`.
pub fn kl_per_state(pi: &JointPolicy, mu: &JointPolicy) -> Result<Vec<f64>> {
    if pi.n_states != mu.n_states || pi.n_joint_actions != mu.n_joint_actions {
        return Err(Error::Shape("policies differ in shape".into()));
    }
    (0..pi.n_states)
        .map(|s| {
            pi.row(s)
                .iter()
                .zip(mu.row(s))
                .enumerate()
                .try_fold(0.0, |acc, (a, (&p, &m))| {
                    if p == 0.0 {
                        Ok(acc)
                    } else if m == 0.0 {
                        Err(Error::DivergentKl(format!(
                            "pi puts mass {p} on joint action {a} in state {s} where mu is 0"
                        )))
                    } else {
                        Ok(acc + p * (p / m).ln())
                    }
                })
        })
        .collect()
}

/// Exact regularized value of `pi` in every state: solves
/// `V = E_pi[r - alpha log(pi/mu) + gamma E V]` as a linear system.
pub fn regularized_values(
    pi: &JointPolicy,
    mdp: &TabularMdp,
    mu: &JointPolicy,
    alpha: f64,
) -> Result<Vec<f64>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Param(format!("alpha must be >= 0, got {alpha}")));
    }
    check_inputs(mdp, mu)?;
    if pi.n_states != mdp.n_states || pi.n_joint_actions != mdp.n_joint_actions() {
        return Err(Error::Shape("policy does not match the MDP".into()));
    }
    pi.check_normalized(1e-9)?;
    let kl = kl_per_state(pi, mu)?;
    let ns = mdp.n_states;
    let mut a = DMatrix::<f64>::identity(ns, ns);
    let mut rhs = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        if mdp.terminal[s] {
            continue;
        }
        let row = pi.row(s);
        let mut expected_reward = 0.0;
        for (j, &p) in row.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            expected_reward += p * mdp.reward(s, j);
            for (s2, &pt) in mdp.transition_row(s, j).iter().enumerate() {
                if !mdp.terminal[s2] {
                    a[(s, s2)] -= mdp.gamma * p * pt;
                }
            }
        }
        rhs[s] = expected_reward - alpha * kl[s];
    }
    let solution = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("policy evaluation system is singular".into()))?;
    Ok(solution.iter().copied().collect())
}

/// Regularized return of `pi` from the initial-state distribution.
pub fn regularized_return(
    pi: &JointPolicy,
    mdp: &TabularMdp,
    mu: &JointPolicy,
    alpha: f64,
) -> Result<f64> {
    let v = regularized_values(pi, mdp, mu, alpha)?;
    Ok(mdp.initial.iter().zip(&v).map(|(p, v)| p * v).sum())
}

#[cfg(test)]
mod tests;
