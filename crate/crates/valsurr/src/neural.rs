//! Feedforward and residual multilayer perceptrons for scalar
//! regression, trained with mini-batch Adam.
//!
//! The network is an input projection, a stack of hidden layers
//! `f(x) = sigma(W x + b)` (optionally `x + sigma(W x + b)` where the
//! widths allow a skip), and a linear head. Backpropagation is batched
//! over GEMMs; training is single-threaded and bit-reproducible for a
//! fixed seed.

use crate::data::Dataset;
use crate::surrogate::{Surrogate, SurrogateError};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("hidden widths must be nonempty and positive")]
    BadWidths,
    #[error("residual layers need equal consecutive widths ({0} vs {1})")]
    ResidualWidthMismatch(usize, usize),
    #[error("input of dimension {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("batch size and learning rate must be positive")]
    BadTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLPConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub residual: bool,
    pub seed: u64,
}

impl MLPConfig {
    /// The benchmark architecture: input projection, three fully
    /// connected 512-wide layers, linear head. At `input_dim = 16` this
    /// has 797185 parameters.
    pub fn benchmark_default(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths: vec![512; 4],
            activation: Activation::Relu,
            residual: false,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), NeuralError> {
        if self.hidden_widths.is_empty() || self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(NeuralError::BadWidths);
        }
        if self.residual {
            for pair in self.hidden_widths.windows(2) {
                if pair[0] != pair[1] {
                    return Err(NeuralError::ResidualWidthMismatch(pair[0], pair[1]));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    /// stop once the relative training error drops below this
    pub target_train_err: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            target_train_err: None,
        }
    }
}

/// One affine layer, weights stored (out x in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All parameters: hidden layers plus the linear output head (the last
/// entry, with a single output row and no activation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLPParams {
    pub layers: Vec<Layer>,
}

impl MLPParams {
    /// Seeded uniform init scaled by 1/sqrt(fan_in).
    pub fn init(config: &MLPConfig) -> Result<Self, NeuralError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_widths);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-scale..scale));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.gen_range(-scale..scale));
                Layer { weight, bias }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(config: &MLPConfig) -> Result<Self, NeuralError> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_widths);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|pair| Layer {
                weight: Array2::zeros((pair[1], pair[0])),
                bias: Array1::zeros(pair[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn residual_applies(&self, config: &MLPConfig, layer: usize) -> bool {
        config.residual
            && layer < self.layers.len() - 1
            && self.layers[layer].weight.nrows() == self.layers[layer].weight.ncols()
    }
}

/// Batched forward pass; rows of `x` are samples.
pub fn forward_batch(
    params: &MLPParams,
    config: &MLPConfig,
    x: &Array2<f64>,
) -> Result<Array1<f64>, NeuralError> {
    if x.ncols() != config.input_dim {
        return Err(NeuralError::DimensionMismatch { expected: config.input_dim, got: x.ncols() });
    }
    let mut z = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let is_head = l == params.layers.len() - 1;
        let mut a = z.dot(&layer.weight.t());
        for mut row in a.rows_mut() {
            row += &layer.bias;
        }
        if is_head {
            return Ok(a.index_axis(Axis(1), 0).to_owned());
        }
        let activated = a.mapv(|v| config.activation.apply(v));
        z = if params.residual_applies(config, l) { z + activated } else { activated };
    }
    unreachable!("network always has a head layer")
}

pub fn forward(params: &MLPParams, config: &MLPConfig, x: &[f64]) -> Result<f64, NeuralError> {
    let row = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|_| NeuralError::DimensionMismatch { expected: config.input_dim, got: x.len() })?;
    Ok(forward_batch(params, config, &row)?[0])
}

/// Parameter gradients in the same layer layout as `MLPParams`.
pub type MLPGrads = MLPParams;

/// Mean-squared-error loss and exact parameter gradients on a batch.
pub fn loss_and_grad(
    params: &MLPParams,
    config: &MLPConfig,
    x: &Array2<f64>,
    y: &ArrayView1<f64>,
) -> Result<(f64, MLPGrads), NeuralError> {
    let batch = x.nrows();
    if batch == 0 {
        return Err(NeuralError::EmptyBatch);
    }
    if x.ncols() != config.input_dim {
        return Err(NeuralError::DimensionMismatch { expected: config.input_dim, got: x.ncols() });
    }
    let n_layers = params.layers.len();

    // forward, keeping pre-activations and layer inputs
    let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    let mut preacts: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    let mut z = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut a = z.dot(&layer.weight.t());
        for mut row in a.rows_mut() {
            row += &layer.bias;
        }
        inputs.push(z.clone());
        preacts.push(a.clone());
        if l == n_layers - 1 {
            break;
        }
        let activated = a.mapv(|v| config.activation.apply(v));
        z = if params.residual_applies(config, l) { z + activated } else { activated };
    }
    let yhat = preacts[n_layers - 1].index_axis(Axis(1), 0).to_owned();
    let diff = &yhat - y;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / batch as f64;

    // backward: dz_next carries dL/d(output of hidden layer l)
    let mut grads = Vec::with_capacity(n_layers);
    let scale = 2.0 / batch as f64;
    let delta_head = diff.mapv(|d| scale * d).insert_axis(Axis(1)); // batch x 1
    grads.push(Layer {
        weight: delta_head.t().dot(&inputs[n_layers - 1]),
        bias: delta_head.sum_axis(Axis(0)),
    });
    let mut dz_next = delta_head.dot(&params.layers[n_layers - 1].weight);
    for l in (0..n_layers - 1).rev() {
        let sigma_prime = preacts[l].mapv(|v| config.activation.derivative(v));
        let da = &dz_next * &sigma_prime;
        grads.push(Layer { weight: da.t().dot(&inputs[l]), bias: da.sum_axis(Axis(0)) });
        if l > 0 {
            let mut dz = da.dot(&params.layers[l].weight);
            if params.residual_applies(config, l) {
                // skip connection feeds the layer input directly
                dz += &dz_next;
            }
            dz_next = dz;
        }
    }
    grads.reverse();
    Ok((loss, MLPGrads { layers: grads }))
}

/// Exact gradient of the network output with respect to the input.
pub fn predict_grad(
    params: &MLPParams,
    config: &MLPConfig,
    x: &[f64],
) -> Result<Vec<f64>, NeuralError> {
    if x.len() != config.input_dim {
        return Err(NeuralError::DimensionMismatch { expected: config.input_dim, got: x.len() });
    }
    let n_layers = params.layers.len();
    let mut preacts: Vec<Array1<f64>> = Vec::with_capacity(n_layers);
    let mut z = Array1::from_vec(x.to_vec());
    for (l, layer) in params.layers.iter().enumerate() {
        let a = layer.weight.dot(&z) + &layer.bias;
        preacts.push(a.clone());
        if l == n_layers - 1 {
            break;
        }
        let activated = a.mapv(|v| config.activation.apply(v));
        z = if params.residual_applies(config, l) { z + activated } else { activated };
    }
    // reverse-mode: g carries d(output)/d(output of hidden layer l)
    let mut g = params.layers[n_layers - 1].weight.row(0).to_owned();
    for l in (0..n_layers - 1).rev() {
        let sigma_prime = preacts[l].mapv(|v| config.activation.derivative(v));
        let gated = &g * &sigma_prime;
        let mut back = gated.dot(&params.layers[l].weight);
        if params.residual_applies(config, l) {
            back += &g;
        }
        g = back;
    }
    Ok(g.to_vec())
}

/// Adam moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: MLPParams,
    pub v: MLPParams,
    pub step: usize,
}

impl AdamState {
    pub fn new(config: &MLPConfig) -> Result<Self, NeuralError> {
        Ok(Self { m: MLPParams::zeros(config)?, v: MLPParams::zeros(config)?, step: 0 })
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut MLPParams,
    state: &mut AdamState,
    grads: &MLPGrads,
    tc: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - tc.beta1.powi(t);
    let bc2 = 1.0 - tc.beta2.powi(t);
    for ((layer, grad), (m, v)) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.layers.iter_mut().zip(state.v.layers.iter_mut()))
    {
        ndarray::Zip::from(&mut layer.weight)
            .and(&grad.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|p, &g, mm, vv| {
                *mm = tc.beta1 * *mm + (1.0 - tc.beta1) * g;
                *vv = tc.beta2 * *vv + (1.0 - tc.beta2) * g * g;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *p -= tc.learning_rate * mhat / (vhat.sqrt() + tc.eps_adam);
            });
        ndarray::Zip::from(&mut layer.bias)
            .and(&grad.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, mm, vv| {
                *mm = tc.beta1 * *mm + (1.0 - tc.beta1) * g;
                *vv = tc.beta2 * *vv + (1.0 - tc.beta2) * g * g;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *p -= tc.learning_rate * mhat / (vhat.sqrt() + tc.eps_adam);
            });
    }
}

/// Training outcome: fitted parameters, per-epoch loss trace, relative
/// training error, and wall time.
pub struct TrainResult {
    pub params: MLPParams,
    pub epoch_losses: Vec<f64>,
    pub err_train_2: f64,
    pub cpu_train_s: f64,
}

/// Mini-batch Adam training with seeded shuffling. Deterministic for
/// fixed seeds (single-threaded); aborts if the loss stops being finite.
pub fn train(
    data: &Dataset,
    config: &MLPConfig,
    tc: &TrainConfig,
) -> Result<TrainResult, NeuralError> {
    if data.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    if tc.batch_size == 0 || !(tc.learning_rate > 0.0) {
        return Err(NeuralError::BadTrainConfig);
    }
    let start = Instant::now();
    let n = data.len();
    let d = data.dimension();
    let x_all = Array2::from_shape_fn((n, d), |(i, j)| data.points[i][j]);
    let y_all = Array1::from_vec(data.values.clone());
    let y_norm = y_all.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);

    let mut params = MLPParams::init(config)?;
    let mut state = AdamState::new(config)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        // Fisher-Yates with the epoch RNG
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let xb = Array2::from_shape_fn((chunk.len(), d), |(i, j)| x_all[(chunk[i], j)]);
            let yb = Array1::from_shape_fn(chunk.len(), |i| y_all[chunk[i]]);
            let (loss, grads) = loss_and_grad(&params, config, &xb, &yb.view())?;
            if !loss.is_finite() {
                return Err(NeuralError::Diverged { epoch, loss });
            }
            adam_step(&mut params, &mut state, &grads, tc);
            epoch_loss += loss;
            batches += 1.0;
        }
        epoch_losses.push(epoch_loss / batches);

        if let Some(target) = tc.target_train_err {
            let yhat = forward_batch(&params, config, &x_all)?;
            let err = (&yhat - &y_all).iter().map(|v| v * v).sum::<f64>().sqrt() / y_norm;
            if err <= target {
                break;
            }
        }
    }

    let yhat = forward_batch(&params, config, &x_all)?;
    let err_train_2 = (&yhat - &y_all).iter().map(|v| v * v).sum::<f64>().sqrt() / y_norm;
    Ok(TrainResult {
        params,
        epoch_losses,
        err_train_2,
        cpu_train_s: start.elapsed().as_secs_f64(),
    })
}

/// Fitted network bundled with its architecture so it can act as a
/// value-function surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSurrogate {
    pub config: MLPConfig,
    pub params: MLPParams,
}

impl Surrogate for MlpSurrogate {
    fn value(&self, x: &[f64]) -> Result<f64, SurrogateError> {
        forward(&self.params, &self.config, x)
            .map_err(|e| SurrogateError::Evaluation(e.to_string()))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, SurrogateError> {
        predict_grad(&self.params, &self.config, x)
            .map_err(|e| SurrogateError::Evaluation(e.to_string()))
    }

    fn dofs(&self) -> usize {
        self.params.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config(activation: Activation, residual: bool) -> MLPConfig {
        MLPConfig {
            input_dim: 3,
            hidden_widths: vec![8, 8],
            activation,
            residual,
            seed: 42,
        }
    }

    #[test]
    fn zero_params_produce_zero_output() {
        let cfg = small_config(Activation::Relu, false);
        let params = MLPParams::zeros(&cfg).unwrap();
        assert_eq!(forward(&params, &cfg, &[0.3, -0.5, 1.0]).unwrap(), 0.0);
        assert_eq!(predict_grad(&params, &cfg, &[0.3, -0.5, 1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn residual_layer_with_zero_weights_is_identity() {
        // two equal-width hidden layers, second zeroed: output = head(z1)
        let cfg = small_config(Activation::Tanh, true);
        let mut params = MLPParams::init(&cfg).unwrap();
        params.layers[1].weight.fill(0.0);
        params.layers[1].bias.fill(0.0);
        let x = [0.2, 0.4, -0.1];
        let full = forward(&params, &cfg, &x).unwrap();
        // drop the zeroed layer entirely; with the skip it must not matter
        let cfg_short = MLPConfig {
            input_dim: 3,
            hidden_widths: vec![8],
            activation: Activation::Tanh,
            residual: true,
            seed: 0,
        };
        let short = MLPParams {
            layers: vec![params.layers[0].clone(), params.layers[2].clone()],
        };
        let direct = forward(&short, &cfg_short, &x).unwrap();
        assert_abs_diff_eq!(full, direct, epsilon = 1e-14);
    }

    #[test]
    fn single_tanh_unit_closed_form() {
        let cfg = MLPConfig {
            input_dim: 3,
            hidden_widths: vec![1],
            activation: Activation::Tanh,
            residual: false,
            seed: 0,
        };
        let mut params = MLPParams::zeros(&cfg).unwrap();
        params.layers[0].weight.fill(1.0);
        params.layers[1].weight[(0, 0)] = 2.0;
        for x in [[0.1, 0.2, 0.3], [0.5, -0.5, 0.0], [1.0, 1.0, 1.0], [0.0; 3], [-0.3, 0.7, 0.1]] {
            let expect = 2.0 * (x.iter().sum::<f64>()).tanh();
            assert_abs_diff_eq!(forward(&params, &cfg, &x).unwrap(), expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradients() {
        let cfg = small_config(Activation::Tanh, false);
        let params = MLPParams::init(&cfg).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| 0.1 * (i as f64) - 0.2 * (j as f64));
        let y = forward_batch(&params, &cfg, &x).unwrap();
        let (loss, grads) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-28);
        for layer in &grads.layers {
            assert!(layer.weight.iter().all(|&g| g.abs() < 1e-13));
            assert!(layer.bias.iter().all(|&g| g.abs() < 1e-13));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = small_config(Activation::Tanh, false);
        let mut params = MLPParams::init(&cfg).unwrap();
        let x = Array2::from_shape_fn((7, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let y = Array1::from_shape_fn(7, |i| (i as f64 * 0.71).cos());
        let (_, grads) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
        let h = 1e-6;
        for l in 0..params.layers.len() {
            let probe = (params.layers[l].weight.nrows() - 1, params.layers[l].weight.ncols() - 1);
            for idx in [(0usize, 0usize), probe] {
                let orig = params.layers[l].weight[idx];
                params.layers[l].weight[idx] = orig + h;
                let (lp, _) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
                params.layers[l].weight[idx] = orig - h;
                let (lm, _) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
                params.layers[l].weight[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.layers[l].weight[idx];
                assert!(
                    (fd - an).abs() / an.abs().max(1e-8) < 1e-4,
                    "layer {l} fd {fd} vs {an}"
                );
            }
            let orig = params.layers[l].bias[0];
            params.layers[l].bias[0] = orig + h;
            let (lp, _) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
            params.layers[l].bias[0] = orig - h;
            let (lm, _) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
            params.layers[l].bias[0] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.layers[l].bias[0];
            assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-4, "bias {l} fd {fd} vs {an}");
        }
    }

    #[test]
    fn residual_parameter_gradients_match_finite_differences() {
        let cfg = small_config(Activation::Tanh, true);
        let mut params = MLPParams::init(&cfg).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i + j) as f64 * 0.29).cos());
        let y = Array1::from_shape_fn(5, |i| 0.5 * i as f64);
        let (_, grads) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
        let h = 1e-6;
        for l in 0..params.layers.len() {
            let orig = params.layers[l].weight[(0, 0)];
            params.layers[l].weight[(0, 0)] = orig + h;
            let (lp, _) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
            params.layers[l].weight[(0, 0)] = orig - h;
            let (lm, _) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
            params.layers[l].weight[(0, 0)] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.layers[l].weight[(0, 0)];
            assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-4, "layer {l} fd {fd} vs {an}");
        }
    }

    #[test]
    fn head_only_network_reduces_to_linear_regression_gradient() {
        // no hidden activation path: single 'hidden' layer of width 3 set
        // to identity-like passthrough is avoided; instead compare the
        // head-layer gradient with the closed form 2/N X^T (Xw - y)
        let cfg = MLPConfig {
            input_dim: 4,
            hidden_widths: vec![4],
            activation: Activation::Relu,
            residual: false,
            seed: 1,
        };
        let mut params = MLPParams::zeros(&cfg).unwrap();
        // identity first layer with zero bias and inputs > 0 keeps relu linear
        for i in 0..4 {
            params.layers[0].weight[(i, i)] = 1.0;
        }
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(9);
        let x = Array2::from_shape_fn((20, 4), |_| rng.gen_range(0.1..1.0));
        let y = Array1::from_shape_fn(20, |i| (i as f64 * 0.13).sin());
        // random head weights
        for j in 0..4 {
            params.layers[1].weight[(0, j)] = rng.gen_range(-1.0..1.0);
        }
        let (_, grads) = loss_and_grad(&params, &cfg, &x, &y.view()).unwrap();
        let w = params.layers[1].weight.row(0).to_owned();
        let resid = x.dot(&w) + params.layers[1].bias[0] - &y;
        let expect = x.t().dot(&resid) * (2.0 / 20.0);
        for j in 0..4 {
            assert_abs_diff_eq!(grads.layers[1].weight[(0, j)], expect[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = small_config(Activation::Tanh, false);
        let params = MLPParams::init(&cfg).unwrap();
        let x = [0.25, -0.4, 0.6];
        let g = predict_grad(&params, &cfg, &x).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd =
                (forward(&params, &cfg, &xp).unwrap() - forward(&params, &cfg, &xm).unwrap())
                    / (2.0 * h);
            assert!((fd - g[k]).abs() / g[k].abs().max(1e-8) < 1e-5, "k={k} fd={fd} g={}", g[k]);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let cfg = small_config(Activation::Relu, false);
        let mut params = MLPParams::init(&cfg).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&cfg).unwrap();
        let grads = MLPParams::zeros(&cfg).unwrap();
        adam_step(&mut params, &mut state, &grads, &TrainConfig::default());
        assert_eq!(params, before);
    }

    #[test]
    fn first_adam_step_magnitude_is_learning_rate() {
        // scalar parameter with constant gradient 2: first update is
        // lr * g / (|g| + eps') ~ lr
        let cfg = MLPConfig {
            input_dim: 1,
            hidden_widths: vec![1],
            activation: Activation::Relu,
            residual: false,
            seed: 0,
        };
        let mut params = MLPParams::zeros(&cfg).unwrap();
        let mut state = AdamState::new(&cfg).unwrap();
        let mut grads = MLPParams::zeros(&cfg).unwrap();
        grads.layers[0].weight[(0, 0)] = 2.0;
        let tc = TrainConfig::default();
        adam_step(&mut params, &mut state, &grads, &tc);
        let step1 = params.layers[0].weight[(0, 0)].abs();
        assert_abs_diff_eq!(step1, tc.learning_rate, epsilon = 1e-6);
        // second step with the same gradient stays within [0.9 lr, lr]
        adam_step(&mut params, &mut state, &grads, &tc);
        let step2 = (params.layers[0].weight[(0, 0)].abs() - step1).abs();
        assert!(step2 <= tc.learning_rate * (1.0 + 1e-9));
        assert!(step2 >= 0.9 * tc.learning_rate, "second step {step2}");
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(123);
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let values: Vec<f64> = points.iter().map(|p| p.iter().sum::<f64>()).collect();
        let data = Dataset::new(points, values);
        let cfg = MLPConfig {
            input_dim: 3,
            hidden_widths: vec![16, 16],
            activation: Activation::Tanh,
            residual: false,
            seed: 7,
        };
        let tc = TrainConfig { epochs: 30, batch_size: 32, seed: 5, ..TrainConfig::default() };
        let r1 = train(&data, &cfg, &tc).unwrap();
        let r2 = train(&data, &cfg, &tc).unwrap();
        assert_eq!(r1.params, r2.params, "identical seeds must reproduce bit-identical params");
        assert!(r1.epoch_losses.last().unwrap() < &r1.epoch_losses[0]);
        assert!(r1.err_train_2 < 0.2, "train err {}", r1.err_train_2);
    }

    #[test]
    fn zero_target_descends_after_one_epoch() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(3);
        let points: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let data = Dataset::new(points, vec![0.0; 64]);
        let cfg = MLPConfig {
            input_dim: 2,
            hidden_widths: vec![8],
            activation: Activation::Tanh,
            residual: false,
            seed: 2,
        };
        let tc = TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() };
        let result = train(&data, &cfg, &tc).unwrap();
        assert!(result.epoch_losses[1] < result.epoch_losses[0]);
    }

    #[test]
    fn benchmark_architecture_parameter_count() {
        let cfg = MLPConfig::benchmark_default(16);
        let params = MLPParams::zeros(&cfg).unwrap();
        assert_eq!(params.param_count(), 797_185);
    }
}
