use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Affine layer `y = act(W x + b)`, `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Serialized form of one layer. `weights` is row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Multilayer perceptron. Also used as the container for gradients and
/// optimizer moments, which share its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerRecord>", into = "Vec<LayerRecord>")]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Forward intermediates for one batch: the input to every layer and its
/// pre-activation.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }
}

impl Mlp {
    /// ReLU hidden layers and an identity output, initialized uniformly in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Param(format!("layer widths must be positive, got {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng));
                let bias = Array1::from_shape_fn(fan_out, |_| dist.sample(rng));
                let activation = if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Dense {
                    weights,
                    bias,
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {k}: bias length {} != output dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(Error::Shape(format!("layer {k} has an empty dimension")));
            }
            if let Some(next) = layers.get(k + 1) {
                if next.in_dim() != layer.out_dim() {
                    return Err(Error::Shape(format!(
                        "layer {k} outputs {} but layer {} expects {}",
                        layer.out_dim(),
                        k + 1,
                        next.in_dim()
                    )));
                }
            }
        }
        let mlp = Self { layers };
        if !mlp.is_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(mlp)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Same architecture, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    /// All parameters in a fixed order (layer by layer, weights row-major then bias).
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Largest absolute parameter; handy for checking that a gradient is zero.
    pub fn max_abs(&self) -> f64 {
        self.params().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (out, tape) = self.forward_batch(x)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    /// Forward pass over a batch (one sample per row), recording a tape.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let z = affine(layer, x.view());
            let y = activate(layer.activation, &z);
            inputs.push(x);
            pre_activations.push(z);
            x = y;
        }
        Ok((
            x,
            Tape {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without recording intermediates.
    pub fn predict_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = affine(layer, x.view());
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = z;
        }
        Ok(x)
    }

    /// Gradients of `sum(upstream ⊙ output)` with respect to every parameter.
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<'_, f64>) -> Result<Mlp> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "tape records {} layers, network has {}",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        for (k, (layer, x)) in self.layers.iter().zip(&tape.inputs).enumerate() {
            if x.ncols() != layer.in_dim() {
                return Err(Error::Shape(format!(
                    "tape layer {k} input width {} != {}",
                    x.ncols(),
                    layer.in_dim()
                )));
            }
        }
        if upstream.dim() != (tape.batch_size(), self.output_dim()) {
            return Err(Error::Shape(format!(
                "upstream shape {:?} != ({}, {})",
                upstream.dim(),
                tape.batch_size(),
                self.output_dim()
            )));
        }

        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                let pre = &tape.pre_activations[k];
                match (delta.as_slice_mut(), pre.as_slice()) {
                    (Some(d), Some(z)) => {
                        for (d, &z) in d.iter_mut().zip(z) {
                            if z <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    _ => ndarray::Zip::from(&mut delta).and(pre).for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    }),
                }
            }
            let grad_w = delta.t().dot(&tape.inputs[k]);
            let grad_b = delta.sum_axis(Axis(0));
            if k > 0 {
                delta = delta.dot(&layer.weights);
            }
            grads.push(Dense {
                weights: grad_w,
                bias: grad_b,
                activation: layer.activation,
            });
        }
        grads.reverse();
        Ok(Mlp { layers: grads })
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("parameter shapes differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(scale, &b.weights);
            a.bias.scaled_add(scale, &b.bias);
        }
        Ok(())
    }

    /// Polyak averaging: `self = (1 - tau) * self + tau * online`.
    pub fn soft_update(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Param(format!("soft update rate {tau} outside [0, 1]")));
        }
        if !self.same_shape(online) {
            return Err(Error::Shape("target and online networks differ in shape".into()));
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.weights.zip_mut_with(&o.weights, |t, &o| *t = (1.0 - tau) * *t + tau * o);
            t.bias.zip_mut_with(&o.bias, |t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
        Ok(())
    }

    fn check_input(&self, input: ArrayView2<'_, f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} != network input dim {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }
}

fn affine(layer: &Dense, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut z = Array2::zeros((x.nrows(), layer.out_dim()));
    for mut row in z.rows_mut() {
        row.assign(&layer.bias);
    }
    general_mat_mul(1.0, &x, &layer.weights.t(), 1.0, &mut z);
    z
}

fn activate(activation: Activation, z: &Array2<f64>) -> Array2<f64> {
    match activation {
        Activation::Identity => z.clone(),
        Activation::Relu => z.mapv(|v| v.max(0.0)),
    }
}

impl From<Mlp> for Vec<LayerRecord> {
    fn from(mlp: Mlp) -> Self {
        mlp.layers
            .into_iter()
            .map(|l| LayerRecord {
                rows: l.out_dim(),
                cols: l.in_dim(),
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
                activation: l.activation,
            })
            .collect()
    }
}

impl TryFrom<Vec<LayerRecord>> for Mlp {
    type Error = Error;

    fn try_from(records: Vec<LayerRecord>) -> Result<Self> {
        let layers = records
            .into_iter()
            .enumerate()
            .map(|(k, r)| {
                let weights = Array2::from_shape_vec((r.rows, r.cols), r.weights).map_err(|e| {
                    Error::Shape(format!("layer {k}: {e}"))
                })?;
                Ok(Dense {
                    weights,
                    bias: Array1::from_vec(r.bias),
                    activation: r.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers)
    }
}
