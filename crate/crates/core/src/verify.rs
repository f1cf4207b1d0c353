//! End-to-end comparison of trained models against the exact tabular
//! solution of the same environment.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::envs::{BehaviorPolicy, Env, EnvConfig, JointPolicy, Quality, TabularMdp};
use crate::error::{Error, Result};
use crate::oracle::{self, LocalFactors};
use crate::rng::substream;
use crate::trainer::{self, metrics_csv, Model, TrainConfig};

/// Transitions collected for the verification dataset.
pub const DATASET_TRANSITIONS: usize = 10_000;
/// Independent training seeds averaged by the end-to-end checks.
pub const TRAIN_SEEDS: u64 = 3;
pub const RELATIVE_TOLERANCE: f64 = 0.05;
pub const ALPHA_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Unasserted checks are reported for information and never fail a run.
    pub asserted: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64, asserted: bool) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            asserted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub regularized_return: f64,
    pub final_eval_return: f64,
    /// Learned `Q_tot` at the initial state, one entry per joint action.
    pub q_tot: Vec<f64>,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub env_name: String,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
    pub steps: usize,
    pub dataset_transitions: usize,
    pub oracle_v0: f64,
    pub oracle_q0: Vec<f64>,
    pub seeds: Vec<SeedResult>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub alpha: f64,
    pub seed: u64,
    pub train: TrainConfig,
    pub quality: Quality,
}

impl VerifyOptions {
    /// Desk-scale defaults: small networks, 20k steps, uniform data.
    pub fn new(alpha: f64, seed: u64) -> Self {
        Self {
            alpha,
            seed,
            train: TrainConfig {
                alpha,
                seed,
                hidden: vec![64],
                mixer_hidden: vec![32],
                eval_interval: 1000,
                ..TrainConfig::default()
            },
            quality: Quality::Uniform,
        }
    }
}

fn contraction_gap(mdp: &TabularMdp, mu: &JointPolicy, alpha: f64, seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "verify-contraction");
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let v1: Vec<f64> = (0..mdp.n_states).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let v2: Vec<f64> = (0..mdp.n_states).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t1 = oracle::apply_optimal_operator(&v1, mdp, mu, alpha)?;
        let t2 = oracle::apply_optimal_operator(&v2, mdp, mu, alpha)?;
        let gap = crate::envs::sup_distance(&t1, &t2) - mdp.gamma * crate::envs::sup_distance(&v1, &v2);
        worst = worst.max(gap);
    }
    Ok(worst)
}

fn kl_increase_across_alphas(mdp: &TabularMdp, mu: &JointPolicy) -> Result<f64> {
    let kls = ALPHA_GRID
        .iter()
        .map(|&a| oracle::kl_per_state(&oracle::solve(mdp, mu, a, 1e-10)?.policy, mu))
        .collect::<Result<Vec<_>>>()?;
    let mut worst = f64::NEG_INFINITY;
    for pair in kls.windows(2) {
        for (hi, lo) in pair[1].iter().zip(&pair[0]) {
            worst = worst.max(hi - lo);
        }
    }
    Ok(worst)
}

/// Closed-form local policies of a trained model at every non-terminal
/// state, fed to the brute-force product check.
fn learned_factors(model: &Model, mdp: &TabularMdp, behavior: &BehaviorPolicy, alpha: f64) -> Result<Vec<LocalFactors>> {
    let mut out = Vec::new();
    for s in (0..mdp.n_states).filter(|&s| !mdp.terminal[s]) {
        let obs: Vec<&[f64]> = mdp.observations[s].iter().map(Vec::as_slice).collect();
        let (w, b) = model.mixer.weights(&obs)?;
        let mut q = Vec::with_capacity(obs.len());
        let mut v = Vec::with_capacity(obs.len());
        let mut mu = Vec::with_capacity(obs.len());
        for i in 0..obs.len() {
            let row: Vec<f64> = (0..mdp.n_actions)
                .map(|a| {
                    let mut actions = vec![0; obs.len()];
                    actions[i] = a;
                    model.q_tot(&obs, &actions).map(|(_, _, qs, _)| qs[i])
                })
                .collect::<Result<_>>()?;
            let m = behavior.probs(i, obs[i])?.to_vec();
            v.push(oracle::local_v_solve(w[i], alpha, &row, &m)?);
            q.push(row);
            mu.push(m);
        }
        out.push(LocalFactors { q, v, w, b, mu });
    }
    Ok(out)
}

fn initial_state(mdp: &TabularMdp) -> usize {
    mdp.initial.iter().position(|&p| p > 0.0).unwrap_or(0)
}

/// Generates a dataset, solves the oracle, trains [`TRAIN_SEEDS`] models and
/// compares them. Writes `report.json` and `metrics_seed<k>.csv` into `out`
/// when given.
pub fn verify(env_config: &EnvConfig, options: &VerifyOptions, out: Option<&Path>) -> Result<VerifyReport> {
    let env = Env::from_config(env_config)?;
    let mdp = env.tabular_export()?;
    let alpha = options.alpha;
    let behavior = BehaviorPolicy::for_env(&env, options.quality)?;
    let mu = behavior.joint_policy(&mdp)?;
    let episodes = DATASET_TRANSITIONS.div_ceil(env.horizon());
    let data = Dataset::generate(env_config, &behavior, episodes, options.seed)?;

    let tol = 1e-10;
    let solution = oracle::solve(&mdp, &mu, alpha, tol)?;
    let s0 = initial_state(&mdp);
    let v0 = solution.v[s0];

    let end_to_end = match &env {
        Env::Matrix(game) => game.horizon() == 1 && game.is_additively_decomposable(),
        Env::Grid(_) => false,
    };

    let mut seeds = Vec::new();
    let mut factors_residual: f64 = 0.0;
    for k in 0..TRAIN_SEEDS {
        let seed = options.seed + k;
        let config = TrainConfig {
            alpha,
            gamma: mdp.gamma,
            seed,
            ..options.train.clone()
        };
        let run = trainer::train(&data, &env, &config)?;
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("metrics_seed{seed}.csv"));
            fs::write(&path, metrics_csv(&run.metrics)).map_err(|e| Error::io(&path, e))?;
        }
        let model = run.checkpoint.to_model()?;
        let pi = model.policy().joint_policy(&mdp)?;
        let regularized_return = oracle::regularized_values(&pi, &mdp, &mu, alpha)?[s0];
        let obs: Vec<&[f64]> = mdp.observations[s0].iter().map(Vec::as_slice).collect();
        let q_tot = (0..mdp.n_joint_actions())
            .map(|j| model.q_tot(&obs, &mdp.decode_joint(j)).map(|r| r.3))
            .collect::<Result<Vec<_>>>()?;
        let kl = oracle::kl_per_state(&pi, &mu)?;
        let live: Vec<f64> = (0..mdp.n_states).filter(|&s| !mdp.terminal[s]).map(|s| kl[s]).collect();
        let report = oracle::check_decomposition(&learned_factors(&model, &mdp, &behavior, alpha)?, alpha)?;
        factors_residual = factors_residual.max(report.normalization_residual);
        seeds.push(SeedResult {
            seed,
            regularized_return,
            final_eval_return: run.metrics.last().map_or(f64::NAN, |r| r.eval_return),
            q_tot,
            mean_kl: live.iter().sum::<f64>() / live.len().max(1) as f64,
        });
    }

    let n = seeds.len() as f64;
    let mean_return = seeds.iter().map(|s| s.regularized_return).sum::<f64>() / n;
    let oracle_q0 = solution.q_row(s0).to_vec();
    let q_err = oracle_q0
        .iter()
        .enumerate()
        .map(|(j, &q_star)| {
            let learned = seeds.iter().map(|s| s.q_tot[j]).sum::<f64>() / n;
            (learned - q_star).abs() / q_star.abs().max(1e-12)
        })
        .fold(0.0, f64::max);

    let row_sum_gap = (0..mdp.n_states)
        .map(|s| (solution.policy.row(s).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let u_gap = solution
        .v
        .iter()
        .zip(&solution.u)
        .map(|(v, u)| (v - u - alpha).abs())
        .fold(0.0, f64::max);

    let checks = vec![
        Check::at_most("contraction_gap", contraction_gap(&mdp, &mu, alpha, options.seed)?, 1e-9, true),
        Check::at_most("bellman_residual", solution.residual, 10.0 * tol, true),
        Check::at_most("value_minus_normalizer_minus_alpha", u_gap, 1e-12, true),
        Check::at_most("optimal_policy_row_sum_gap", row_sum_gap, 1e-8, true),
        Check::at_most("learned_decomposition_residual", factors_residual, 1e-8, true),
        Check::at_most("kl_increase_across_alpha", kl_increase_across_alphas(&mdp, &mu)?, 1e-12, true),
        Check::at_most(
            "regularized_return_relative_gap",
            (v0 - mean_return) / v0.abs().max(1e-12),
            RELATIVE_TOLERANCE,
            end_to_end,
        ),
        Check::at_most("q_tot_max_relative_error", q_err, RELATIVE_TOLERANCE, end_to_end),
    ];
    let passed = checks.iter().all(|c| c.passed || !c.asserted);
    let report = VerifyReport {
        env_name: env.name().into(),
        alpha,
        gamma: mdp.gamma,
        seed: options.seed,
        steps: options.train.steps,
        dataset_transitions: data.len(),
        oracle_v0: v0,
        oracle_q0,
        seeds,
        checks,
        passed,
    };
    if let Some(dir) = out {
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::Input(format!("report serialization: {e}")))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
