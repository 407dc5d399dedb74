//! Feed-forward multi-label classifier with explicit forward, backward, and
//! Adam update.
//!
//! The network is a plain MLP: ReLU hidden layers, a linear output layer,
//! and sigmoid probabilities. One designated hidden activation (the "tap")
//! is exposed by the forward pass so the disparity statistic can compare
//! intermediate representations between two networks; its upstream gradient
//! is injected at the matching point of the backward pass.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// One affine layer; `weight` is `(fan_in, fan_out)`, applied as `z = h W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S: Scalar> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

/// Parameters of one classifier network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar> {
    pub layers: Vec<Layer<S>>,
    /// Index `t` of the tapped activation `h_t` (the post-activation output
    /// of layer `t - 1`); `1 <= t < layers.len()`.
    pub tap_index: usize,
    pub activation: Activation,
}

/// All intermediate values of one forward pass needed for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S: Scalar> {
    /// Post-activation output of the tap layer, `batch x h_tap`.
    pub tap_features: Array2<S>,
    /// Output-layer logits, `batch x V`.
    pub logits: Array2<S>,
    /// `sigmoid(logits)`, strictly inside `(0, 1)`.
    pub probabilities: Array2<S>,
    /// `h_0 = input, h_1, ..., h_{L-1}`: the input to each layer.
    activations: Vec<Array2<S>>,
    /// `z_1, ..., z_L`: the pre-activation output of each layer.
    pre_activations: Vec<Array2<S>>,
}

impl<S: Scalar> ForwardTrace<S> {
    /// Smallest `|pre-activation|` over the hidden layers; useful for
    /// keeping finite-difference checks away from the ReLU kink.
    pub fn pre_activations_min_abs(&self) -> Option<S> {
        let hidden = self.pre_activations.len().saturating_sub(1);
        self.pre_activations[..hidden]
            .iter()
            .flat_map(|z| z.iter())
            .map(|v| v.abs())
            .min_by(|a, b| a.partial_cmp(b).expect("activations are never NaN"))
    }
}

/// Gradients shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<S: Scalar> {
    pub layers: Vec<Layer<S>>,
}

/// Adam accumulator state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar> {
    first_moment: Vec<Layer<S>>,
    second_moment: Vec<Layer<S>>,
    pub step: u64,
    pub learning_rate: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
}

impl<S: Scalar> ModelParams<S> {
    /// Widths `[input, hidden..., output]` of the network.
    pub fn arch(&self) -> Vec<usize> {
        let mut widths = vec![self.layers[0].weight.nrows()];
        widths.extend(self.layers.iter().map(|l| l.weight.ncols()));
        widths
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.ncols()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flatten all parameters in layer order, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<S> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            flat.extend(layer.weight.iter().copied());
            flat.extend(layer.bias.iter().copied());
        }
        flat
    }

    /// Overwrite all parameters from a flat slice laid out as [`Self::to_flat`].
    pub fn assign_from_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::validation(format!(
                "flat parameter length {} does not match model size {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut() {
                *w = flat[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }
}

/// Initialize a network with fan-in-scaled uniform weights and zero biases.
///
/// `arch` lists layer widths `[input, hidden..., output]`. Deterministic for
/// a given seed; a collaborative pair is built from two distinct seeds.
pub fn init<S: Scalar>(arch: &[usize], tap_index: usize, seed: u64) -> Result<ModelParams<S>> {
    if arch.len() < 2 {
        return Err(Error::validation(
            "architecture needs at least input and output widths",
        ));
    }
    if arch.contains(&0) {
        return Err(Error::validation("layer widths must be at least 1"));
    }
    let num_layers = arch.len() - 1;
    if tap_index == 0 || tap_index >= num_layers {
        return Err(Error::validation(format!(
            "tap_index must satisfy 1 <= tap < {num_layers}, got {tap_index}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(num_layers);
    for k in 0..num_layers {
        let (fan_in, fan_out) = (arch[k], arch[k + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight =
            Array2::from_shape_fn((fan_in, fan_out), |_| S::cast(rng.random_range(-bound..bound)));
        layers.push(Layer {
            weight,
            bias: Array1::zeros(fan_out),
        });
    }
    Ok(ModelParams {
        layers,
        tap_index,
        activation: Activation::Relu,
    })
}

fn relu<S: Scalar>(z: &Array2<S>) -> Array2<S> {
    z.mapv(|v| v.max(S::zero()))
}

fn sigmoid<S: Scalar>(z: &Array2<S>) -> Array2<S> {
    z.mapv(|v| S::one() / (S::one() + (-v).exp()))
}

/// Forward pass over a batch (rows are samples). Pure function.
pub fn forward<S: Scalar>(params: &ModelParams<S>, x: &Array2<S>) -> Result<ForwardTrace<S>> {
    if x.ncols() != params.input_width() {
        return Err(Error::validation(format!(
            "input has {} features but the network expects {}",
            x.ncols(),
            params.input_width()
        )));
    }
    let num_layers = params.layers.len();
    let mut activations = Vec::with_capacity(num_layers);
    let mut pre_activations = Vec::with_capacity(num_layers);
    let mut h = x.clone();
    for (k, layer) in params.layers.iter().enumerate() {
        let z = h.dot(&layer.weight) + &layer.bias;
        activations.push(h);
        h = if k + 1 < num_layers { relu(&z) } else { z.clone() };
        pre_activations.push(z);
    }
    let logits = h;
    let probabilities = sigmoid(&logits);
    let tap_features = if params.tap_index < activations.len() {
        activations[params.tap_index].clone()
    } else {
        logits.clone()
    };
    Ok(ForwardTrace {
        tap_features,
        logits,
        probabilities,
        activations,
        pre_activations,
    })
}

/// Backward pass: exact gradients of a scalar loss given its gradient w.r.t.
/// the final logits and w.r.t. the tap features.
///
/// The tap contribution enters where the tap activation was produced and
/// flows through the layers below it.
pub fn backward<S: Scalar>(
    params: &ModelParams<S>,
    trace: &ForwardTrace<S>,
    grad_logits: &Array2<S>,
    grad_tap: &Array2<S>,
) -> Result<ParamGrads<S>> {
    if grad_logits.dim() != trace.logits.dim() {
        return Err(Error::validation(format!(
            "logit gradient shape {:?} does not match logits {:?}",
            grad_logits.dim(),
            trace.logits.dim()
        )));
    }
    if grad_tap.dim() != trace.tap_features.dim() {
        return Err(Error::validation(format!(
            "tap gradient shape {:?} does not match tap features {:?}",
            grad_tap.dim(),
            trace.tap_features.dim()
        )));
    }

    let num_layers = params.layers.len();
    let mut grads: Vec<Layer<S>> = Vec::with_capacity(num_layers);
    let mut delta = grad_logits.clone();
    for k in (0..num_layers).rev() {
        let h_in = &trace.activations[k];
        grads.push(Layer {
            weight: h_in.t().dot(&delta),
            bias: delta.sum_axis(Axis(0)),
        });
        if k > 0 {
            let mut dh = delta.dot(&params.layers[k].weight.t());
            if k == params.tap_index {
                dh += grad_tap;
            }
            // h_k = relu(z_k); pre_activations[k - 1] holds z_k.
            let z = &trace.pre_activations[k - 1];
            dh.zip_mut_with(z, |g, &zv| {
                if zv <= S::zero() {
                    *g = S::zero();
                }
            });
            delta = dh;
        }
    }
    grads.reverse();
    Ok(ParamGrads { layers: grads })
}

impl<S: Scalar> AdamState<S> {
    /// Fresh optimizer state with zero moments.
    pub fn new(params: &ModelParams<S>, learning_rate: S) -> Self {
        let zeros: Vec<Layer<S>> = params
            .layers
            .iter()
            .map(|l| Layer {
                weight: Array2::zeros(l.weight.dim()),
                bias: Array1::zeros(l.bias.len()),
            })
            .collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            learning_rate,
            beta1: S::cast(ADAM_BETA1),
            beta2: S::cast(ADAM_BETA2),
            epsilon: S::cast(ADAM_EPSILON),
        }
    }
}

/// One Adam update with bias correction; returns the new parameters and
/// optimizer state.
pub fn adam_step<S: Scalar>(
    params: &ModelParams<S>,
    grads: &ParamGrads<S>,
    state: &AdamState<S>,
) -> Result<(ModelParams<S>, AdamState<S>)> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::validation("gradient layout does not match model"));
    }
    for (g, p) in grads.layers.iter().zip(&params.layers) {
        if g.weight.dim() != p.weight.dim() || g.bias.len() != p.bias.len() {
            return Err(Error::validation("gradient layout does not match model"));
        }
    }

    let mut new_params = params.clone();
    let mut new_state = state.clone();
    new_state.step = state.step + 1;
    let t = new_state.step as i32;
    let bias1 = S::one() - state.beta1.powi(t);
    let bias2 = S::one() - state.beta2.powi(t);
    let one_minus_b1 = S::one() - state.beta1;
    let one_minus_b2 = S::one() - state.beta2;

    for (layer_idx, grad_layer) in grads.layers.iter().enumerate() {
        let update = |theta: &mut S, m: &mut S, v: &mut S, g: S| {
            *m = state.beta1 * *m + one_minus_b1 * g;
            *v = state.beta2 * *v + one_minus_b2 * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        };
        let p = &mut new_params.layers[layer_idx];
        let m = &mut new_state.first_moment[layer_idx];
        let v = &mut new_state.second_moment[layer_idx];
        for ((theta, (m, v)), &g) in p
            .weight
            .iter_mut()
            .zip(m.weight.iter_mut().zip(v.weight.iter_mut()))
            .zip(grad_layer.weight.iter())
        {
            update(theta, m, v, g);
        }
        for ((theta, (m, v)), &g) in p
            .bias
            .iter_mut()
            .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
            .zip(grad_layer.bias.iter())
        {
            update(theta, m, v, g);
        }
    }
    Ok((new_params, new_state))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Vec<usize>,
    tap_index: usize,
    activation: Activation,
    step: u64,
}

/// Write a checkpoint: one line of JSON (architecture, tap index, step)
/// followed by every parameter as little-endian 64-bit floats in layer
/// order, weights row-major then bias.
pub fn save_checkpoint<S: Scalar>(params: &ModelParams<S>, step: u64, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        arch: params.arch(),
        tap_index: params.tap_index,
        activation: params.activation,
        step,
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in params.to_flat() {
        let bits = v.to_f64().expect("scalar converts to f64");
        out.write_all(&bits.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<Real>, u64)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "missing checkpoint header".into(),
            });
        }
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&header_line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("invalid checkpoint header: {e}"),
        })?;
    if header.arch.len() < 2 || header.arch.contains(&0) {
        return Err(Error::validation("checkpoint architecture is invalid"));
    }

    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    let expected: usize = header
        .arch
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum::<usize>();
    if blob.len() != expected * 8 {
        return Err(Error::validation(format!(
            "checkpoint blob holds {} bytes but the architecture needs {}",
            blob.len(),
            expected * 8
        )));
    }
    let flat: Vec<Real> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let layers = header
        .arch
        .windows(2)
        .map(|w| Layer {
            weight: Array2::zeros((w[0], w[1])),
            bias: Array1::zeros(w[1]),
        })
        .collect();
    let mut params = ModelParams {
        layers,
        tap_index: header.tap_index,
        activation: header.activation,
    };
    params.assign_from_flat(&flat)?;
    Ok((params, header.step))
}
