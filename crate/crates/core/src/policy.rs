//! Categorical softmax policies over a linear map or a small MLP, with
//! hand-written reverse-mode gradients of the log-probabilities.
//!
//! Parameters live in one flat [`ParamVector`]. Layers are stored in order;
//! each layer contributes its weight matrix (row-major, `out x in`) followed by
//! its bias vector.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
    Tanh,
}

/// Applied to the final-layer pre-activations before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
    pub input_dim: usize,
    pub action_count: usize,
    /// `false` entries are never chosen (log-probability `-inf`).
    #[serde(default)]
    pub action_mask: Option<Vec<bool>>,
}

impl PolicySpec {
    pub fn linear(input_dim: usize, action_count: usize) -> Self {
        PolicySpec {
            architecture: Architecture::Linear,
            hidden_sizes: Vec::new(),
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::Identity,
            input_dim,
            action_count,
            action_mask: None,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden_sizes: Vec<usize>,
        action_count: usize,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Self {
        PolicySpec {
            architecture: Architecture::Mlp,
            hidden_sizes,
            hidden_activation,
            output_activation,
            input_dim,
            action_count,
            action_mask: None,
        }
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        if self.architecture == Architecture::Mlp {
            dims.extend(&self.hidden_sizes);
        }
        dims.push(self.action_count);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.action_count == 0 {
            return Err(Error::config(
                "policy input_dim and action_count must be positive",
            ));
        }
        match self.architecture {
            Architecture::Linear if !self.hidden_sizes.is_empty() => {
                return Err(Error::config("linear policy cannot have hidden layers"));
            }
            Architecture::Mlp if self.hidden_sizes.is_empty() || self.hidden_sizes.len() > 2 => {
                return Err(Error::config("mlp policy needs one or two hidden layers"));
            }
            _ => {}
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::config("hidden layer sizes must be positive"));
        }
        if let Some(mask) = &self.action_mask {
            if mask.len() != self.action_count || !mask.iter().any(|m| *m) {
                return Err(Error::config(
                    "action mask must have one entry per action and allow at least one",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    weight_offset: usize,
    bias_offset: usize,
}

/// Per-layer weights and biases, the structured view of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SoftmaxPolicy {
    spec: PolicySpec,
    layers: Vec<LayerShape>,
    param_count: usize,
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct Forward {
    /// `inputs[l]` is the input of layer `l`; the last entry is unused.
    activations: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(spec: PolicySpec) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for w in dims.windows(2) {
            let (inputs, outputs) = (w[0], w[1]);
            layers.push(LayerShape {
                inputs,
                outputs,
                weight_offset: offset,
                bias_offset: offset + inputs * outputs,
            });
            offset += inputs * outputs + outputs;
        }
        Ok(SoftmaxPolicy {
            spec,
            layers,
            param_count: offset,
        })
    }

    pub fn linear(input_dim: usize, action_count: usize) -> Result<Self> {
        Self::new(PolicySpec::linear(input_dim, action_count))
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn action_count(&self) -> usize {
        self.spec.action_count
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init_params(&self, rng: &mut dyn RngCore) -> ParamVector {
        let mut theta = ParamVector::zeros(self.param_count);
        for layer in &self.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for i in 0..layer.inputs * layer.outputs {
                theta[layer.weight_offset + i] = rng.random_range(-bound..=bound);
            }
        }
        theta
    }

    pub fn unflatten(&self, theta: &ParamVector) -> Result<Vec<LayerParams>> {
        theta.check_dim(self.param_count)?;
        let t = theta.as_slice();
        Ok(self
            .layers
            .iter()
            .map(|l| LayerParams {
                weights: t[l.weight_offset..l.bias_offset].to_vec(),
                biases: t[l.bias_offset..l.bias_offset + l.outputs].to_vec(),
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[LayerParams]) -> Result<ParamVector> {
        if layers.len() != self.layers.len() {
            return Err(Error::Dimension {
                expected: self.layers.len(),
                got: layers.len(),
            });
        }
        let mut out = Vec::with_capacity(self.param_count);
        for (shape, params) in self.layers.iter().zip(layers) {
            if params.weights.len() != shape.inputs * shape.outputs
                || params.biases.len() != shape.outputs
            {
                return Err(Error::config("layer parameter shape mismatch"));
            }
            out.extend_from_slice(&params.weights);
            out.extend_from_slice(&params.biases);
        }
        Ok(ParamVector::from_vec(out))
    }

    fn is_allowed(&self, action: usize) -> bool {
        self.spec.action_mask.as_ref().is_none_or(|m| m[action])
    }

    fn forward(&self, theta: &ParamVector, state: &[f64]) -> Result<Forward> {
        theta.check_dim(self.param_count)?;
        if state.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                expected: self.spec.input_dim,
                got: state.len(),
            });
        }
        let t = theta.as_slice();
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(state.to_vec());
        for (li, layer) in self.layers.iter().enumerate() {
            let input = &activations[li];
            let w = &t[layer.weight_offset..layer.bias_offset];
            let b = &t[layer.bias_offset..layer.bias_offset + layer.outputs];
            let z: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                    b[o] + row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>()
                })
                .collect();
            let out: Vec<f64> = if li == last {
                match self.spec.output_activation {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                }
            } else {
                match self.spec.hidden_activation {
                    HiddenActivation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                    HiddenActivation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                }
            };
            pre.push(z);
            activations.push(out);
        }
        let logits = activations.last().expect("at least one layer");
        let log_probs = self.log_softmax(logits);
        Ok(Forward {
            activations,
            pre,
            log_probs,
        })
    }

    fn log_softmax(&self, logits: &[f64]) -> Vec<f64> {
        let max = logits
            .iter()
            .enumerate()
            .filter(|(a, _)| self.is_allowed(*a))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits
            .iter()
            .enumerate()
            .filter(|(a, _)| self.is_allowed(*a))
            .map(|(_, v)| (v - max).exp())
            .sum();
        let lse = max + sum.ln();
        logits
            .iter()
            .enumerate()
            .map(|(a, v)| {
                if self.is_allowed(a) {
                    v - lse
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    /// log π_θ(·|s)
    pub fn action_log_probs(&self, theta: &ParamVector, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(theta, state)?.log_probs)
    }

    /// ∇_θ log π_θ(a|s)
    pub fn log_prob_gradient(
        &self,
        theta: &ParamVector,
        state: &[f64],
        action: usize,
    ) -> Result<ParamVector> {
        let mut grad = ParamVector::zeros(self.param_count);
        self.accumulate_score(theta, state, action, 1.0, grad.as_mut_slice())?;
        Ok(grad)
    }

    /// Adds `scale * ∇_θ log π_θ(a|s)` into `out` and returns log π_θ(a|s).
    pub fn accumulate_score(
        &self,
        theta: &ParamVector,
        state: &[f64],
        action: usize,
        scale: f64,
        out: &mut [f64],
    ) -> Result<f64> {
        if action >= self.spec.action_count || !self.is_allowed(action) {
            return Err(Error::config(format!("action {action} is not available")));
        }
        if out.len() != self.param_count {
            return Err(Error::Dimension {
                expected: self.param_count,
                got: out.len(),
            });
        }
        let fwd = self.forward(theta, state)?;
        let log_prob = fwd.log_probs[action];
        if scale == 0.0 {
            return Ok(log_prob);
        }
        let t = theta.as_slice();
        let last = self.layers.len() - 1;

        // d log π(a) / d logits = e_a - π, zero on masked actions.
        let mut delta: Vec<f64> = fwd
            .log_probs
            .iter()
            .enumerate()
            .map(|(i, lp)| {
                let p = if lp.is_finite() { lp.exp() } else { 0.0 };
                if i == action {
                    1.0 - p
                } else {
                    -p
                }
            })
            .collect();
        if self.spec.output_activation == OutputActivation::Tanh {
            for (d, y) in delta.iter_mut().zip(&fwd.activations[last + 1]) {
                *d *= 1.0 - y * y;
            }
        }

        for li in (0..self.layers.len()).rev() {
            let layer = self.layers[li];
            let input = &fwd.activations[li];
            for o in 0..layer.outputs {
                let d = scale * delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut out[layer.weight_offset + o * layer.inputs
                    ..layer.weight_offset + (o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                out[layer.bias_offset + o] += d;
            }
            if li == 0 {
                break;
            }
            let w = &t[layer.weight_offset..layer.bias_offset];
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += wi * d;
                }
            }
            let below = &fwd.pre[li - 1];
            match self.spec.hidden_activation {
                HiddenActivation::Relu => {
                    for (p, z) in prev.iter_mut().zip(below) {
                        if *z <= 0.0 {
                            *p = 0.0;
                        }
                    }
                }
                HiddenActivation::Tanh => {
                    for (p, y) in prev.iter_mut().zip(&fwd.activations[li]) {
                        *p *= 1.0 - y * y;
                    }
                }
            }
            delta = prev;
        }
        Ok(log_prob)
    }
}
