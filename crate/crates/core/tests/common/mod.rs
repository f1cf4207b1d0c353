//! Helpers shared by the gradient tests and the acceptance suite.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use omiga::approximator::Mlp;
use omiga::dataset::Batch;
use omiga::rng::{substream, Rng};
use omiga::trainer::{policy_loss, q_loss, v_loss, Dims, Model, TrainConfig, Variant};
use rand::Rng as _;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `grads` and central differences of `loss`
/// with respect to the network selected by `pick`.
pub fn fd_error<P, L>(model: &Model, pick: P, grads: &Mlp, loss: L) -> f64
where
    P: Fn(&mut Model) -> &mut Mlp,
    L: Fn(&Model) -> f64,
{
    let analytic: Vec<f64> = grads.params().collect();
    let mut worst: f64 = 0.0;
    for (k, &g) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        *pick(&mut plus).params_mut().nth(k).unwrap() += STEP;
        let mut minus = model.clone();
        *pick(&mut minus).params_mut().nth(k).unwrap() -= STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        worst = worst.max(relative_error(g, numeric));
    }
    worst
}

pub fn random_batch(rng: &mut Rng, dims: Dims, len: usize) -> Batch {
    let obs = |rng: &mut Rng| Array2::from_shape_fn((len, dims.obs_dim), |_| rng.gen_range(-1.0..1.0));
    let obs_now: Vec<_> = (0..dims.n_agents).map(|_| obs(rng)).collect();
    let obs_next: Vec<_> = (0..dims.n_agents).map(|_| obs(rng)).collect();
    Batch {
        indices: (0..len).collect(),
        obs: obs_now,
        next_obs: obs_next,
        actions: (0..dims.n_agents)
            .map(|_| (0..len).map(|_| rng.gen_range(0..dims.n_actions)).collect())
            .collect(),
        rewards: Array1::from_shape_fn(len, |_| rng.gen_range(-1.0..1.0)),
        dones: Array1::from_shape_fn(len, |_| f64::from(u8::from(rng.gen_bool(0.3)))),
    }
}

/// Small model whose target Q differs from the online one.
pub fn random_model(rng: &mut Rng, dims: Dims, config: &TrainConfig) -> Model {
    let mut model = Model::new(dims, config, rng).unwrap();
    for net in &mut model.q_target {
        for p in net.params_mut() {
            *p += rng.gen_range(-0.2..0.2);
        }
    }
    model
}

pub fn small_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        hidden: vec![6],
        mixer_hidden: vec![5],
        alpha: 0.7,
        gamma: 0.9,
        variant,
        ..TrainConfig::default()
    }
}

pub const DIMS: Dims = Dims {
    n_agents: 2,
    obs_dim: 3,
    n_actions: 3,
};

/// Largest finite-difference error over every gradient the three losses
/// return, mixer networks included.
pub fn worst_loss_gradient_error(variant: Variant, seed: u64) -> f64 {
    let config = small_config(variant);
    let mut rng = substream(seed, "fd-losses");
    let model = random_model(&mut rng, DIMS, &config);
    let batch = random_batch(&mut rng, DIMS, 7);

    let v = v_loss(&batch, &model, &config).unwrap();
    let q = q_loss(&batch, &model, &config).unwrap();
    let pi = policy_loss(&batch, &model, &config).unwrap();
    let vl = |m: &Model| v_loss(&batch, m, &config).unwrap().loss;
    let ql = |m: &Model| q_loss(&batch, m, &config).unwrap().loss;
    let pl = |m: &Model| policy_loss(&batch, m, &config).unwrap().loss;

    let mut worst: f64 = 0.0;
    for i in 0..DIMS.n_agents {
        worst = worst.max(fd_error(&model, |m| &mut m.v[i], &v.v_grads[i], vl));
        worst = worst.max(fd_error(&model, |m| &mut m.q[i], &q.q_grads[i], ql));
        worst = worst.max(fd_error(&model, |m| &mut m.pi[i], &pi.pi_grads[i], pl));
    }
    worst = worst.max(fd_error(&model, |m| &mut m.mixer.w_net, &q.w_grads, ql));
    worst.max(fd_error(&model, |m| &mut m.mixer.b_net, &q.b_grads, ql))
}

/// Central-difference check of `backward` on one random network; returns the
/// largest relative error.
pub fn worst_network_gradient_error(rng: &mut Rng) -> f64 {
    let depth = rng.gen_range(0..3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=16)).collect();
    let (inputs, outputs) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    let net = Mlp::new(inputs, &hidden, outputs, rng).unwrap();
    let rows = rng.gen_range(1..=4);
    let x = Array2::from_shape_fn((rows, inputs), |_| rng.gen_range(-1.0..1.0));
    let up = Array2::from_shape_fn((rows, outputs), |_| rng.gen_range(-1.0..1.0));
    let loss = |n: &Mlp| (n.predict_batch(x.view()).unwrap() * &up).sum();
    let (_, tape) = net.forward_batch(x.view()).unwrap();
    let grads = net.backward(&tape, up.view()).unwrap();
    let mut worst: f64 = 0.0;
    for (k, g) in grads.params().enumerate() {
        let mut plus = net.clone();
        *plus.params_mut().nth(k).unwrap() += STEP;
        let mut minus = net.clone();
        *minus.params_mut().nth(k).unwrap() -= STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        worst = worst.max(relative_error(g, numeric));
    }
    worst
}
