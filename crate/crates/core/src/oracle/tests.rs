use std::f64::consts::E;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::envs::{BehaviorPolicy, Env, EnvConfig, Quality};

fn coordination_game() -> (TabularMdp, JointPolicy) {
    let env = Env::from_config(&EnvConfig::matrix_game(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
    let mdp = env.tabular_export().unwrap();
    let mu = BehaviorPolicy::for_env(&env, Quality::Uniform)
        .unwrap()
        .joint_policy(&mdp)
        .unwrap();
    (mdp, mu)
}

/// Single recurrent state, one agent, two actions, constant reward.
fn constant_reward_loop(c: f64, gamma: f64) -> (TabularMdp, JointPolicy) {
    let mdp = TabularMdp {
        n_agents: 1,
        n_actions: 2,
        n_states: 1,
        gamma,
        transitions: vec![1.0, 1.0],
        rewards: vec![c, c],
        terminal: vec![false],
        initial: vec![1.0],
        observations: vec![vec![vec![1.0]]],
    };
    let mu = JointPolicy {
        n_states: 1,
        n_joint_actions: 2,
        probs: vec![0.3, 0.7],
    };
    (mdp, mu)
}

/// Root of `E_mu[exp((Q - u)/alpha - 1)] = 1` by bisection; independent of
/// the log-mean-exp closed form.
fn normalizer_by_bisection(q: &[f64], mu: &[f64], alpha: f64) -> f64 {
    let g = |u: f64| -> f64 {
        q.iter()
            .zip(mu)
            .map(|(q, p)| p * ((q - u) / alpha - 1.0).exp())
            .sum::<f64>()
            - 1.0
    };
    let (mut lo, mut hi) = (-1e3, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        // g is decreasing in u.
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Iterative evaluation of `E_pi[r + gamma E V]` without any KL term.
fn plain_evaluation(pi: &JointPolicy, mdp: &TabularMdp) -> Vec<f64> {
    let mut v = vec![0.0; mdp.n_states];
    for _ in 0..20_000 {
        v = (0..mdp.n_states)
            .map(|s| {
                if mdp.terminal[s] {
                    return 0.0;
                }
                pi.row(s)
                    .iter()
                    .enumerate()
                    .map(|(a, p)| p * (mdp.reward(s, a) + mdp.gamma * mdp.expected_next(s, a, &v)))
                    .sum()
            })
            .collect();
    }
    v
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - ratio * (hi - lo);
        let b = lo + ratio * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn operator_on_coordination_game() {
    let (mdp, mu) = coordination_game();
    let v = apply_optimal_operator(&[0.0, 0.0], &mdp, &mu, 1.0).unwrap();
    let expected = ((E + 3.0) / 4.0).ln();
    assert!((v[0] - expected).abs() < 1e-14);
    assert!((v[0] - 0.35737).abs() < 1e-5);
    assert_eq!(v[1], 0.0);
}

#[test]
fn operator_with_constant_reward() {
    let (mdp, mu) = constant_reward_loop(2.0, 0.9);
    let v = apply_optimal_operator(&[0.0], &mdp, &mu, 0.5).unwrap();
    assert!((v[0] - 2.0).abs() < 1e-12);
    let sol = solve(&mdp, &mu, 0.5, 1e-12).unwrap();
    assert!((sol.v[0] - 20.0).abs() < 1e-9);
    for (p, m) in sol.policy.row(0).iter().zip(mu.row(0)) {
        assert!((p - m).abs() < 1e-9);
    }
}

#[test]
fn operator_degenerates_to_behavior_evaluation_for_huge_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mdp = TabularMdp::random(&mut rng, 5, 2, 2, 0.9, 0.2);
    let mu = JointPolicy::random_factored(&mdp, &mut rng, 0.2);
    let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let soft = apply_optimal_operator(&v, &mdp, &mu, 1e6).unwrap();
    for s in 0..5 {
        let direct: f64 = if mdp.terminal[s] {
            0.0
        } else {
            mu.row(s)
                .iter()
                .enumerate()
                .map(|(a, p)| p * (mdp.reward(s, a) + mdp.gamma * mdp.expected_next(s, a, &v)))
                .sum()
        };
        assert!((soft[s] - direct).abs() < 1e-4, "state {s}: {} vs {direct}", soft[s]);
    }
}

#[test]
fn operator_rejects_unnormalized_behavior() {
    let (mdp, mut mu) = coordination_game();
    mu.probs[0] += 1e-6;
    assert!(matches!(
        apply_optimal_operator(&[0.0, 0.0], &mdp, &mu, 1.0),
        Err(Error::Input(_))
    ));
    let (mdp, mu) = coordination_game();
    assert!(matches!(
        apply_optimal_operator(&[0.0, 0.0], &mdp, &mu, 0.0),
        Err(Error::Param(_))
    ));
}

#[test]
fn solve_coordination_game() {
    let (mdp, mu) = coordination_game();
    let sol = solve(&mdp, &mu, 1.0, 1e-12).unwrap();
    let v0 = ((E + 3.0) / 4.0).ln();
    assert!((sol.v[0] - v0).abs() < 1e-12);
    assert!((sol.q_row(0)[0] - 1.0).abs() < 1e-15);
    assert!(sol.q_row(0)[1..].iter().all(|&q| q == 0.0));
    let row = sol.policy.row(0);
    // Brute force: normalize mu * exp(Q) directly.
    let weights: Vec<f64> = sol.q_row(0).iter().map(|q| 0.25 * q.exp()).collect();
    let z: f64 = weights.iter().sum();
    for (p, w) in row.iter().zip(&weights) {
        assert!((p - w / z).abs() < 1e-12);
    }
    assert!((row[0] - 0.4754).abs() < 1e-4);
    for p in &row[1..] {
        assert!((p - 0.1749).abs() < 1e-4);
    }
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(sol.u[0], sol.v[0] - 1.0);
}

#[test]
fn solve_is_cauchy_in_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mdp = TabularMdp::random(&mut rng, 8, 2, 3, 0.9, 0.1);
    let mu = JointPolicy::random_factored(&mdp, &mut rng, 0.1);
    let fine = solve(&mdp, &mu, 0.7, 1e-12).unwrap();
    let coarse = solve(&mdp, &mu, 0.7, 1e-6).unwrap();
    assert!(crate::envs::sup_distance(&fine.v, &coarse.v) < 1e-5);
    assert!(fine.iterations > coarse.iterations);
}

#[test]
fn closed_form_normalizer_matches_root_finder() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mdp = TabularMdp::random(&mut rng, 6, 2, 2, 0.8, 0.2);
        let mu = JointPolicy::random_factored(&mdp, &mut rng, 0.3);
        let alpha = rng.gen_range(0.1..5.0);
        let sol = solve(&mdp, &mu, alpha, 1e-12).unwrap();
        for s in (0..mdp.n_states).filter(|&s| !mdp.terminal[s]) {
            let u = normalizer_by_bisection(sol.q_row(s), mu.row(s), alpha);
            assert!((u - sol.u[s]).abs() < 1e-8, "state {s}: {u} vs {}", sol.u[s]);
            assert!((sol.v[s] - (u + alpha)).abs() < 1e-8);
        }
    }
}

#[test]
fn optimal_policy_properties() {
    let (_, mu) = coordination_game();
    // Action-independent Q: V = Q and pi = mu.
    let pi = optimal_policy(&[0.7; 8], &[0.7, 0.7], &mu, 2.0).unwrap();
    assert_eq!(pi.probs, mu.probs);

    let (mdp, mu) = coordination_game();
    let sol = solve(&mdp, &mu, 1.0, 1e-12).unwrap();
    let shifted_q: Vec<f64> = sol.q.iter().map(|q| q + 3.5).collect();
    let shifted_v: Vec<f64> = sol.v.iter().map(|v| v + 3.5).collect();
    let shifted = optimal_policy(&shifted_q, &shifted_v, &mu, 1.0).unwrap();
    for (a, b) in shifted.probs.iter().zip(&sol.policy.probs) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut bad_v = sol.v.clone();
    bad_v[0] += 0.1;
    assert!(matches!(
        optimal_policy(&sol.q, &bad_v, &mu, 1.0),
        Err(Error::Consistency(_))
    ));
}

#[test]
fn local_v_closed_form_and_search() {
    let q = [1.0, 0.0];
    let mu = [0.5, 0.5];
    let v = local_v_solve(1.0, 1.0, &q, &mu).unwrap();
    assert!((v - ((E + 1.0) / 2.0).ln()).abs() < 1e-14);
    assert!((v - 0.62011).abs() < 1e-5);
    let searched = golden_section_min(|x| local_v_objective(x, 1.0, 1.0, &q, &mu), -5.0, 5.0);
    assert!((searched - v).abs() < 1e-6);
    assert!(self_normalization_residual(v, 1.0, 1.0, &q, &mu).abs() < 1e-10);
}

#[test]
fn local_v_constant_and_zero_weight() {
    for (w, alpha) in [(0.0, 1.0), (0.3, 2.0), (5.0, 0.1)] {
        let v = local_v_solve(w, alpha, &[1.25; 3], &[0.2, 0.3, 0.5]).unwrap();
        assert!((v - 1.25).abs() < 1e-12);
    }
    let v = local_v_solve(0.0, 1.0, &[1.0, 3.0], &[0.25, 0.75]).unwrap();
    assert_eq!(v, 2.5);
    // Continuity of the w -> 0 limit.
    let near = local_v_solve(1e-7, 1.0, &[1.0, 3.0], &[0.25, 0.75]).unwrap();
    assert!((near - 2.5).abs() < 1e-5);
    assert!(matches!(local_v_solve(1.0, 1.0, &[1.0], &[0.9]), Err(Error::Input(_))));
}

fn random_factors(rng: &mut ChaCha8Rng, n: usize, na: usize, alpha: f64) -> LocalFactors {
    let mu: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..na).map(|_| rng.gen::<f64>() + 0.05).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|x| x / t).collect()
        })
        .collect();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..na).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
    let v = (0..n)
        .map(|i| local_v_solve(w[i], alpha, &q[i], &mu[i]).unwrap())
        .collect();
    LocalFactors {
        q,
        v,
        w,
        b: rng.gen_range(-2.0..2.0),
        mu,
    }
}

#[test]
fn decomposition_two_agents() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let f = random_factors(&mut rng, 2, 2, 1.0);
    let report = check_decomposition(&[f], 1.0).unwrap();
    assert!(report.normalization_residual <= 1e-8);
}

#[test]
fn decomposition_zero_weights_reduce_to_behavior() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut f = random_factors(&mut rng, 2, 3, 1.0);
    f.w = vec![0.0, 0.0];
    f.v = (0..2).map(|i| local_v_solve(0.0, 1.0, &f.q[i], &f.mu[i]).unwrap()).collect();
    let report = check_decomposition(&[f], 1.0).unwrap();
    assert!(report.normalization_residual < 1e-15);
}

#[test]
fn decomposition_three_agents_many_seeds() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = rng.gen_range(0.2..10.0);
        let f = random_factors(&mut rng, 3, 3, alpha);
        let report = check_decomposition(&[f], alpha).unwrap();
        assert!(report.normalization_residual <= 1e-8, "seed {seed}: {report:?}");
    }
}

#[test]
fn decomposition_precondition() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut f = random_factors(&mut rng, 2, 2, 1.0);
    f.w[0] = 1.0;
    f.v[0] += 0.5;
    assert!(matches!(check_decomposition(&[f], 1.0), Err(Error::Precondition(_))));
}

#[test]
fn regularized_return_of_behavior_is_plain_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mdp = TabularMdp::random(&mut rng, 6, 2, 2, 0.9, 0.2);
    let mu = JointPolicy::random_factored(&mdp, &mut rng, 0.2);
    let reg = regularized_values(&mu, &mdp, &mu, 3.0).unwrap();
    let plain = plain_evaluation(&mu, &mdp);
    assert!(crate::envs::sup_distance(&reg, &plain) < 1e-9);
}

#[test]
fn regularized_return_of_optimum_matches_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mdp = TabularMdp::random(&mut rng, 6, 2, 2, 0.9, 0.2);
    let mu = JointPolicy::random_factored(&mdp, &mut rng, 0.2);
    let sol = solve(&mdp, &mu, 0.5, 1e-13).unwrap();
    let ret = regularized_return(&sol.policy, &mdp, &mu, 0.5).unwrap();
    assert!((ret - sol.v[0]).abs() < 1e-8);
}

#[test]
fn random_policies_never_beat_the_optimum() {
    let (mdp, mu) = coordination_game();
    let sol = solve(&mdp, &mu, 1.0, 1e-13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..100 {
        let pi = JointPolicy::random_factored(&mdp, &mut rng, 0.0);
        let ret = regularized_return(&pi, &mdp, &mu, 1.0).unwrap();
        assert!(ret <= sol.v[0] + 1e-8);
        // Non-factored joint policies too.
        let raw: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
        let t: f64 = raw.iter().sum();
        let mut joint = JointPolicy::uniform(&mdp);
        joint.probs[..4].copy_from_slice(&raw.iter().map(|x| x / t).collect::<Vec<_>>());
        assert!(regularized_return(&joint, &mdp, &mu, 1.0).unwrap() <= sol.v[0] + 1e-8);
    }
}

#[test]
fn support_violation_is_divergent() {
    let (mdp, mut mu) = coordination_game();
    mu.probs[..4].copy_from_slice(&[0.5, 0.5, 0.0, 0.0]);
    let pi = JointPolicy::uniform(&mdp);
    assert!(matches!(
        regularized_return(&pi, &mdp, &mu, 1.0),
        Err(Error::DivergentKl(_))
    ));
    // Zero pi where mu is zero is fine.
    let mut inside = JointPolicy::uniform(&mdp);
    inside.probs[..4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    assert!(regularized_return(&inside, &mdp, &mu, 1.0).is_ok());
}

#[test]
fn joint_action_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mdp = TabularMdp::random(&mut rng, 1, 7, 4, 0.5, 0.0);
    let mu = JointPolicy::uniform(&mdp);
    assert!(matches!(solve(&mdp, &mu, 1.0, 1e-6), Err(Error::Unsupported(_))));
}

#[test]
fn kl_shrinks_as_alpha_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10 {
        let mdp = TabularMdp::random(&mut rng, 5, 2, 2, 0.9, 0.2);
        let mu = JointPolicy::random_factored(&mdp, &mut rng, 0.2);
        let kls: Vec<Vec<f64>> = [0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&a| kl_per_state(&solve(&mdp, &mu, a, 1e-12).unwrap().policy, &mu).unwrap())
            .collect();
        for pair in kls.windows(2) {
            for s in 0..mdp.n_states {
                assert!(pair[1][s] <= pair[0][s] + 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_is_a_gamma_contraction(
        seed in any::<u64>(),
        n_states in 1usize..8,
        n_actions in 1usize..4,
        gamma in prop::sample::select(vec![0.5, 0.9, 0.99]),
        alpha in 0.05f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(&mut rng, n_states, 2, n_actions, gamma, 0.2);
        let mu = JointPolicy::random_factored(&mdp, &mut rng, 0.1);
        let v1: Vec<f64> = (0..n_states).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let v2: Vec<f64> = (0..n_states).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t1 = apply_optimal_operator(&v1, &mdp, &mu, alpha).unwrap();
        let t2 = apply_optimal_operator(&v2, &mdp, &mu, alpha).unwrap();
        let lhs = crate::envs::sup_distance(&t1, &t2);
        let rhs = gamma * crate::envs::sup_distance(&v1, &v2);
        prop_assert!(lhs <= rhs + 1e-9, "{lhs} > {rhs}");
    }

    #[test]
    fn local_objective_is_convex_and_minimized(
        seed in any::<u64>(),
        w in 0.01f64..3.0,
        alpha in 0.1f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_factors(&mut rng, 1, 4, alpha);
        let (q, mu) = (&f.q[0], &f.mu[0]);
        let v = local_v_solve(w, alpha, q, mu).unwrap();
        let h = 0.01;
        let grid: Vec<f64> = (-50..=50)
            .map(|k| local_v_objective(v + k as f64 * h, w, alpha, q, mu))
            .collect();
        for k in 1..grid.len() - 1 {
            prop_assert!(grid[k - 1] - 2.0 * grid[k] + grid[k + 1] >= -1e-9);
        }
        let centre = grid[50];
        prop_assert!(grid.iter().all(|&g| g >= centre - 1e-12));
        prop_assert!(self_normalization_residual(v, w, alpha, q, mu).abs() <= 1e-10);
    }
}
