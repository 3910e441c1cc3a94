//! Dense ReLU network with a bias-free sigmoid output layer.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `fan_in × fan_out` per layer.
    pub layer_weights: Vec<Array2<f64>>,
    /// Hidden layers carry a bias; the output layer does not.
    pub layer_biases: Vec<Option<Array1<f64>>>,
    /// Input width followed by every layer's width; the last entry is `G`.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub dropout_rate: f64,
}

/// Partial derivatives shape-matched to [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Option<Array1<f64>>>,
}

/// Uniform Glorot initialization; hidden biases start at zero.
pub fn init_params(layer_sizes: &[usize], seed: u64) -> Result<ModelParams> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "layer_sizes needs an input width and at least one layer, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = layer_sizes.len() - 1;
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for (k, pair) in layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
        weights.push(w);
        biases.push((k + 1 < n_layers).then(|| Array1::zeros(fan_out)));
    }
    Ok(ModelParams {
        layer_weights: weights,
        layer_biases: biases,
        layer_sizes: layer_sizes.to_vec(),
        dropout_rate: 0.0,
    })
}

impl ModelParams {
    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layer_weights.len();
        if n == 0 || self.layer_sizes.len() != n + 1 || self.layer_biases.len() != n {
            return Err(Error::Shape("inconsistent layer counts".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        for k in 0..n {
            let w = &self.layer_weights[k];
            if w.dim() != (self.layer_sizes[k], self.layer_sizes[k + 1]) {
                return Err(Error::Shape(format!(
                    "layer {k} weight is {:?}, expected ({}, {})",
                    w.dim(),
                    self.layer_sizes[k],
                    self.layer_sizes[k + 1]
                )));
            }
            match (&self.layer_biases[k], k + 1 == n) {
                (Some(_), true) => {
                    return Err(Error::Shape("output layer must not have a bias".into()))
                }
                (None, false) => {
                    return Err(Error::Shape(format!("hidden layer {k} is missing its bias")))
                }
                (Some(b), false) if b.len() != self.layer_sizes[k + 1] => {
                    return Err(Error::Shape(format!("layer {k} bias has wrong length")))
                }
                _ => {}
            }
        }
        if !self.iter_flat().all(f64::is_finite) {
            return Err(Error::NumericInput("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.layer_weights.iter().map(|w| w.len()).sum::<usize>()
            + self.layer_biases.iter().flatten().map(|b| b.len()).sum::<usize>()
    }

    /// All parameters in a fixed order: every layer's weights (row-major)
    /// followed by that layer's bias.
    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layer_weights
            .iter()
            .zip(&self.layer_biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter().flat_map(|b| b.iter())).copied())
    }

    pub fn flat_mut(&mut self) -> Vec<&mut f64> {
        self.layer_weights
            .iter_mut()
            .zip(self.layer_biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut().flat_map(|b| b.iter_mut())))
            .collect()
    }
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            weights: params
                .layer_weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: params
                .layer_biases
                .iter()
                .map(|b| b.as_ref().map(|b| Array1::zeros(b.raw_dim())))
                .collect(),
        }
    }

    /// Same ordering as [`ModelParams::iter_flat`].
    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter().flat_map(|b| b.iter())).copied())
    }

    pub fn flat_mut(&mut self) -> Vec<&mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut().flat_map(|b| b.iter_mut())))
            .collect()
    }

    pub fn matches_shape(&self, params: &ModelParams) -> bool {
        self.weights.len() == params.layer_weights.len()
            && self.biases.len() == params.layer_biases.len()
            && self
                .weights
                .iter()
                .zip(&params.layer_weights)
                .all(|(g, w)| g.dim() == w.dim())
            && self
                .biases
                .iter()
                .zip(&params.layer_biases)
                .all(|(g, b)| match (g, b) {
                    (Some(g), Some(b)) => g.len() == b.len(),
                    (None, None) => true,
                    _ => false,
                })
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_flat().fold(0.0, |m, x| m.max(x.abs()))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-layer activations kept for the backward pass.
struct ForwardCache {
    /// `inputs[k]` is the input to layer `k` (after dropout for hidden inputs).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    hidden_pre: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers applied to hidden activations.
    masks: Vec<Option<Array2<f64>>>,
    output: Array2<f64>,
}

fn check_features(params: &ModelParams, features: ArrayView2<f64>) -> Result<()> {
    params.validate()?;
    if features.ncols() != params.n_inputs() {
        return Err(Error::Shape(format!(
            "features have {} columns, network expects {}",
            features.ncols(),
            params.n_inputs()
        )));
    }
    if let Some(((r, c), v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NumericInput(format!("feature ({r}, {c}) is {v}")));
    }
    Ok(())
}

fn forward_cached(
    params: &ModelParams,
    features: ArrayView2<f64>,
    dropout_seed: Option<u64>,
) -> ForwardCache {
    let n_layers = params.n_layers();
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let keep = 1.0 - params.dropout_rate;
    let mut inputs = Vec::with_capacity(n_layers);
    let mut hidden_pre = Vec::with_capacity(n_layers - 1);
    let mut masks = Vec::with_capacity(n_layers - 1);
    let mut x = features.to_owned();
    for k in 0..n_layers - 1 {
        let mut z = x.dot(&params.layer_weights[k]);
        if let Some(b) = &params.layer_biases[k] {
            z += b;
        }
        let mut a = z.mapv(|v| v.max(0.0));
        let mask = match rng.as_mut() {
            Some(rng) if params.dropout_rate > 0.0 => {
                let m = Array2::from_shape_fn(a.raw_dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                a *= &m;
                Some(m)
            }
            _ => None,
        };
        inputs.push(x);
        hidden_pre.push(z);
        masks.push(mask);
        x = a;
    }
    let logits = x.dot(&params.layer_weights[n_layers - 1]);
    inputs.push(x);
    ForwardCache {
        inputs,
        hidden_pre,
        masks,
        output: logits.mapv(sigmoid),
    }
}

/// Output probabilities (`N × G`). Dropout is applied only when `training`
/// is set, with masks drawn from `seed`; evaluation ignores the seed.
pub fn forward(
    params: &ModelParams,
    features: ArrayView2<f64>,
    training: bool,
    seed: u64,
) -> Result<Array2<f64>> {
    check_features(params, features)?;
    Ok(forward_cached(params, features, training.then_some(seed)).output)
}

/// Evaluation-mode loss and gradient.
pub fn backward(
    params: &ModelParams,
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    loss_config: &LossConfig,
) -> Result<(f64, GradientBundle)> {
    backward_impl(params, features, targets, loss_config, None)
}

/// Training-mode loss and gradient with dropout masks drawn from `seed`.
pub fn backward_train(
    params: &ModelParams,
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    loss_config: &LossConfig,
    seed: u64,
) -> Result<(f64, GradientBundle)> {
    backward_impl(params, features, targets, loss_config, Some(seed))
}

fn backward_impl(
    params: &ModelParams,
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    loss_config: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, GradientBundle)> {
    check_features(params, features)?;
    let cache = forward_cached(params, features, dropout_seed);
    let (loss, d_prob) = losses::loss_and_grad(targets, cache.output.view(), loss_config)?;

    let n_layers = params.n_layers();
    let mut grads = GradientBundle::zeros_like(params);
    // through the sigmoid
    let mut delta = d_prob * &cache.output.mapv(|p| p * (1.0 - p));
    for k in (0..n_layers).rev() {
        grads.weights[k] = cache.inputs[k].t().dot(&delta);
        if let Some(b) = grads.biases[k].as_mut() {
            *b = delta.sum_axis(Axis(0));
        }
        if k == 0 {
            break;
        }
        let mut upstream = delta.dot(&params.layer_weights[k].t());
        if let Some(mask) = &cache.masks[k - 1] {
            upstream *= mask;
        }
        Zip::from(&mut upstream)
            .and(&cache.hidden_pre[k - 1])
            .for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        delta = upstream;
    }
    Ok((loss, grads))
}
