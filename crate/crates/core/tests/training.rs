use ndarray::{arr1, arr2, Array1, Array2};
use omiga::approximator::{Activation, Adam, AdamConfig, Dense, Mlp};
use omiga::dataset::{Batch, Dataset};
use omiga::envs::{BehaviorPolicy, Env, EnvConfig, JointAction, Quality};
use omiga::error::Error;
use omiga::rng::substream;
use omiga::trainer::{
    ablation_variant, bc_train, evaluate, metrics_csv, policy_loss, q_loss, train, v_loss, DecentralizedPolicy, Dims,
    EvalMode, Model, TrainConfig, Variant,
};

const COORDINATION: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
const ADDITIVE: [f64; 4] = [1.0, 0.2, 0.5, -0.3];

fn linear(weights: Array2<f64>, bias: Array1<f64>) -> Mlp {
    Mlp::from_layers(vec![Dense {
        weights,
        bias,
        activation: Activation::Identity,
    }])
    .unwrap()
}

const ONE_AGENT: Dims = Dims {
    n_agents: 1,
    obs_dim: 1,
    n_actions: 2,
};

fn one_agent_model(config: &TrainConfig) -> Model {
    Model::new(ONE_AGENT, config, &mut substream(0, "init")).unwrap()
}

/// One observation `[1]`, the given actions, terminal one-step transitions.
fn one_state_batch(actions: &[usize]) -> Batch {
    let b = actions.len();
    Batch {
        indices: (0..b).collect(),
        obs: vec![Array2::ones((b, 1))],
        next_obs: vec![Array2::ones((b, 1))],
        actions: vec![actions.to_vec()],
        rewards: Array1::zeros(b),
        dones: Array1::ones(b),
    }
}

fn unit_weight_config(alpha: f64) -> TrainConfig {
    TrainConfig {
        alpha,
        hidden: vec![4],
        mixer_hidden: vec![4],
        variant: Variant::NoW,
        ..TrainConfig::default()
    }
}

fn matrix(payoff: [f64; 4]) -> (EnvConfig, Env) {
    let cfg = EnvConfig::matrix_game(payoff.to_vec());
    let env = Env::from_config(&cfg).unwrap();
    (cfg, env)
}

fn uniform_dataset(payoff: [f64; 4], episodes: usize) -> (Env, Dataset) {
    let (cfg, env) = matrix(payoff);
    let mu = BehaviorPolicy::for_env(&env, Quality::Uniform).unwrap();
    let data = Dataset::generate(&cfg, &mu, episodes, 0).unwrap();
    (env, data)
}

#[test]
fn zero_mixer_weights_give_unit_v_loss() {
    let config = TrainConfig {
        hidden: vec![5],
        mixer_hidden: vec![3],
        ..TrainConfig::default()
    };
    let dims = Dims {
        n_agents: 2,
        obs_dim: 1,
        n_actions: 2,
    };
    let mut model = Model::new(dims, &config, &mut substream(1, "init")).unwrap();
    model.mixer.w_net = model.mixer.w_net.zeros_like();
    let (_, data) = uniform_dataset(COORDINATION, 20);
    let out = v_loss(&data.full_batch(), &model, &config).unwrap();
    assert_eq!(out.loss, 1.0);
    assert!(out.v_grads.iter().all(|g| g.max_abs() == 0.0));
    assert_eq!(out.mean_w, 0.0);
}

#[test]
fn v_loss_single_sample() {
    let config = unit_weight_config(1.0);
    let mut model = one_agent_model(&config);
    model.q_target[0] = model.q_target[0].zeros_like();
    model.v[0] = model.v[0].zeros_like();
    assert_eq!(v_loss(&one_state_batch(&[0]), &model, &config).unwrap().loss, 1.0);
}

#[test]
fn unit_weights_v_loss_formula() {
    for (c, alpha) in [(0.3, 1.0), (-1.2, 0.5), (2.0, 4.0)] {
        let config = unit_weight_config(alpha);
        let mut model = one_agent_model(&config);
        model.q_target[0] = linear(Array2::zeros((1, 3)), arr1(&[c]));
        model.v[0] = linear(Array2::zeros((1, 1)), arr1(&[c]));
        let loss = v_loss(&one_state_batch(&[0, 1, 1]), &model, &config).unwrap().loss;
        assert!((loss - (1.0 + c / alpha)).abs() < 1e-12);
    }
}

#[test]
fn v_minimizer_is_log_mean_exp() {
    let config = unit_weight_config(1.0);
    let mut model = one_agent_model(&config);
    // Qbar(a=0) = 1, Qbar(a=1) = 0.
    model.q_target[0] = linear(arr2(&[[0.0, 1.0, 0.0]]), arr1(&[0.0]));
    model.v[0] = linear(Array2::zeros((1, 1)), arr1(&[0.0]));
    let batch = one_state_batch(&[0, 1, 0, 1]);
    let mut opt = Adam::new(&model.v[0], AdamConfig::with_lr(0.01)).unwrap();
    for _ in 0..4000 {
        let out = v_loss(&batch, &model, &config).unwrap();
        opt.step(&mut model.v[0], &out.v_grads[0]).unwrap();
    }
    let v = model.v[0].predict_batch(Array2::ones((1, 1)).view()).unwrap()[[0, 0]];
    let expected = ((1f64.exp() + 1.0) / 2.0).ln();
    assert!((v - expected).abs() < 1e-3, "V = {v}");
    let residual = ((1.0 - v).exp() + (-v).exp()) / 2.0 - 1.0;
    assert!(residual.abs() <= 1e-3);
}

#[test]
fn q_loss_degenerate_examples() {
    let config = TrainConfig {
        gamma: 0.0,
        ..unit_weight_config(1.0)
    };
    let mut model = one_agent_model(&config);
    model.q[0] = model.q[0].zeros_like();
    model.mixer.b_net = model.mixer.b_net.zeros_like();
    let mut batch = one_state_batch(&[0, 1]);
    batch.dones = Array1::zeros(2);
    assert_eq!(q_loss(&batch, &model, &config).unwrap().loss, 0.0);

    let config = unit_weight_config(1.0);
    let mut batch = one_state_batch(&[1]);
    batch.rewards = arr1(&[1.0]);
    assert_eq!(q_loss(&batch, &model, &config).unwrap().loss, 1.0);
}

fn train_policy(model: &mut Model, batch: &Batch, config: &TrainConfig, steps: usize) -> Vec<f64> {
    let mut opt = Adam::new(&model.pi[0], AdamConfig::with_lr(0.01)).unwrap();
    for _ in 0..steps {
        let out = policy_loss(batch, model, config).unwrap();
        opt.step(&mut model.pi[0], &out.pi_grads[0]).unwrap();
    }
    model.policy().probs(0, &[1.0]).unwrap()
}

#[test]
fn advantage_weighting_fixed_point() {
    let config = unit_weight_config(1.0);
    let mut model = one_agent_model(&config);
    // Q(a=0) = 1, Q(a=1) = -1, V = 0.
    model.q[0] = linear(arr2(&[[0.0, 1.0, -1.0]]), arr1(&[0.0]));
    model.v[0] = model.v[0].zeros_like();
    let batch = one_state_batch(&[0, 1, 0, 1]);
    let p = train_policy(&mut model, &batch, &config, 3000);
    let e2 = 2f64.exp();
    assert!(p[0] >= 0.87, "pi(a0) = {}", p[0]);
    assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-3);
}

#[test]
fn huge_alpha_recovers_empirical_behavior() {
    let config = TrainConfig {
        alpha: 1e6,
        variant: Variant::Full,
        ..unit_weight_config(1e6)
    };
    let mut model = one_agent_model(&config);
    let batch = one_state_batch(&[0, 0, 0, 0, 0, 0, 0, 1, 1, 1]);
    let p = train_policy(&mut model, &batch, &config, 3000);
    assert!((p[0] - 0.7).abs() <= 0.02, "pi = {p:?}");
}

#[test]
fn unit_weight_policy_loss_is_negative_log_likelihood() {
    let config = unit_weight_config(1.0);
    let mut model = one_agent_model(&config);
    model.q[0] = model.q[0].zeros_like();
    model.v[0] = model.v[0].zeros_like();
    let actions = [0, 1, 1];
    let loss = policy_loss(&one_state_batch(&actions), &model, &config).unwrap().loss;
    let p = model.policy().probs(0, &[1.0]).unwrap();
    let nll = -actions.iter().map(|&a| p[a].ln()).sum::<f64>() / 3.0;
    assert!((loss - nll).abs() < 1e-12);
}

#[test]
fn ablation_shapes() {
    assert_eq!(ablation_variant("full").unwrap(), TrainConfig::default());
    let config = TrainConfig {
        hidden: vec![4],
        ..ablation_variant("local_w").unwrap()
    };
    let dims = Dims {
        n_agents: 3,
        obs_dim: 5,
        n_actions: 2,
    };
    let model = Model::new(dims, &config, &mut substream(0, "init")).unwrap();
    assert_eq!(model.mixer.w_net.input_dim(), 5);
    assert_eq!(model.mixer.b_net.input_dim(), 15);
    let full = Model::new(dims, &TrainConfig { hidden: vec![4], ..TrainConfig::default() }, &mut substream(0, "init"))
        .unwrap();
    assert_eq!(full.mixer.w_net.input_dim(), 15);
    assert!(matches!(ablation_variant("weighted"), Err(Error::Param(_))));
}

fn quick_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        hidden: vec![16],
        mixer_hidden: vec![8],
        eval_interval: 10,
        eval_episodes: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_returns_initialization() {
    let (env, data) = uniform_dataset(COORDINATION, 50);
    let config = quick_config(0);
    let out = train(&data, &env, &config).unwrap();
    assert!(out.metrics.is_empty());
    let dims = Dims {
        n_agents: 2,
        obs_dim: 1,
        n_actions: 2,
    };
    let init = Model::new(dims, &config, &mut substream(config.seed, "init")).unwrap();
    assert_eq!(out.checkpoint.to_model().unwrap(), init);
}

#[test]
fn metrics_rows_and_determinism() {
    let (env, data) = uniform_dataset(COORDINATION, 50);
    let config = quick_config(25);
    let a = train(&data, &env, &config).unwrap();
    let steps: Vec<usize> = a.metrics.iter().map(|r| r.step).collect();
    assert_eq!(steps, [10, 20, 25]);
    let b = train(&data, &env, &config).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = train(&data, &env, &TrainConfig { seed: 1, ..config }).unwrap();
    assert_ne!(a.checkpoint, c.checkpoint);
}

#[test]
fn each_variant_trains() {
    let (env, data) = uniform_dataset(COORDINATION, 50);
    for variant in [Variant::Full, Variant::NoW, Variant::LocalW] {
        let out = train(&data, &env, &TrainConfig { variant, ..quick_config(30) }).unwrap();
        assert!(out.checkpoint.to_model().unwrap().is_finite());
        let mean_w = out.metrics[0].mean_w.unwrap();
        assert!(mean_w >= 0.0);
    }
}

#[test]
fn q_tot_converges_to_payoff() {
    let (env, data) = uniform_dataset(ADDITIVE, 10_000);
    let config = TrainConfig {
        steps: 5000,
        hidden: vec![64],
        mixer_hidden: vec![32],
        eval_interval: 5000,
        ..TrainConfig::default()
    };
    let model = train(&data, &env, &config).unwrap().checkpoint.to_model().unwrap();
    let obs: Vec<&[f64]> = vec![&[1.0], &[1.0]];
    for (j, &r) in ADDITIVE.iter().enumerate() {
        let q = model.q_tot(&obs, &[j / 2, j % 2]).unwrap().3;
        assert!((q - r).abs() <= 0.05, "joint {j}: Q_tot {q}, payoff {r}");
    }
}

fn zero_policy(n_agents: usize) -> DecentralizedPolicy {
    let net = Mlp::new(1, &[4], 2, &mut substream(0, "zero")).unwrap().zeros_like();
    DecentralizedPolicy::new(vec![net; n_agents])
}

#[test]
fn uniform_policy_scores_a_quarter() {
    let (_, env) = matrix(COORDINATION);
    let stats = evaluate(&zero_policy(2), &env, 10_000, 0, EvalMode::Stochastic).unwrap();
    assert!((stats.mean - 0.25).abs() < 0.015, "{stats:?}");
}

#[test]
fn greedy_forced_action_always_pays() {
    let (_, env) = matrix(COORDINATION);
    let forced = linear(Array2::zeros((2, 1)), arr1(&[3.0, 0.0]));
    let policy = DecentralizedPolicy::new(vec![forced.clone(), forced]);
    let stats = evaluate(&policy, &env, 32, 0, EvalMode::Greedy).unwrap();
    assert_eq!((stats.mean, stats.std), (1.0, 0.0));
}

#[test]
fn evaluation_rejects_mismatched_policy() {
    let (_, env) = matrix(COORDINATION);
    assert!(matches!(
        evaluate(&zero_policy(3), &env, 4, 0, EvalMode::Stochastic),
        Err(Error::Compatibility(_))
    ));
    let grid = Env::from_config(&EnvConfig::coop_grid(3)).unwrap();
    assert!(matches!(
        evaluate(&zero_policy(2), &grid, 4, 0, EvalMode::Stochastic),
        Err(Error::Compatibility(_))
    ));
}

fn bc_config() -> TrainConfig {
    TrainConfig {
        steps: 1500,
        hidden: vec![16],
        lr_pi: 3e-3,
        eval_interval: 1500,
        eval_episodes: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn bc_on_uniform_data_is_uniform() {
    let (env, data) = uniform_dataset(COORDINATION, 10_000);
    let policy = bc_train(&data, &env, &bc_config()).unwrap().checkpoint.policy().unwrap();
    for i in 0..2 {
        let p = policy.probs(i, &[1.0]).unwrap();
        assert!((p[0] - 0.5).abs() <= 0.02, "agent {i}: {p:?}");
    }
}

#[test]
fn bc_on_expert_data_is_deterministic() {
    let (env, mut data) = uniform_dataset(COORDINATION, 500);
    for tr in &mut data.transitions {
        tr.act = JointAction(vec![0, 0]);
    }
    let policy = bc_train(&data, &env, &bc_config()).unwrap().checkpoint.policy().unwrap();
    for i in 0..2 {
        assert!(policy.probs(i, &[1.0]).unwrap()[0] >= 0.99);
    }
}

#[test]
fn empty_dataset_is_a_usage_error() {
    let (env, mut data) = uniform_dataset(COORDINATION, 5);
    data.transitions.clear();
    assert!(matches!(bc_train(&data, &env, &bc_config()), Err(Error::Usage(_))));
    assert!(matches!(train(&data, &env, &quick_config(5)), Err(Error::Usage(_))));
}
