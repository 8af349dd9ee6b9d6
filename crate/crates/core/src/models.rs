//! Multilayer perceptrons with a flat parameter vector and analytic
//! backpropagation.
//!
//! Parameter layout is layer-major: for each affine layer, its weight matrix
//! (`out × in`, row-major) followed by its bias (`out`). Hidden layers apply
//! the activation; the output layer is linear.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GulfError, Result};
use crate::numerics::{norm_sq, DenseMatrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// The relu subgradient at 0 is 0.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - a * a,
        }
    }

    /// Variance gain for normal initialisation (`gain / fan_in`).
    fn init_gain(self) -> f64 {
        match self {
            Self::Relu => 2.0,
            Self::Tanh => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(GulfError::InvalidParameter(format!(
                "all layer widths must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offset of each layer's weights within the flat vector.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut offset = 0;
        self.layer_dims()
            .iter()
            .map(|(i, o)| {
                let start = offset;
                offset += i * o + o;
                start
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    arch: MlpArchitecture,
    theta: Vec<f64>,
}

/// Activations kept from a forward pass for reuse by [`MlpModel::backward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the output of hidden layer `l`.
    inputs: Vec<DenseMatrix>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DenseMatrix>,
    output: DenseMatrix,
}

impl ForwardCache {
    pub fn output(&self) -> &DenseMatrix {
        &self.output
    }
}

impl MlpModel {
    /// Wraps a flat parameter vector, checking its length and finiteness.
    pub fn from_theta(arch: MlpArchitecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(GulfError::InvalidDimension(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(GulfError::InvalidInput("non-finite parameter".into()));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: MlpArchitecture) -> Result<Self> {
        let n = arch.param_count();
        Self::from_theta(arch, vec![0.0; n])
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub(crate) fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::from_theta(self.arch.clone(), theta)
    }

    /// `(weights, bias)` slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = self.arch.layer_dims()[l];
        let start = self.arch.layer_offsets()[l];
        let w_end = start + fan_in * fan_out;
        (&self.theta[start..w_end], &self.theta[w_end..w_end + fan_out])
    }

    pub fn num_layers(&self) -> usize {
        self.arch.hidden_dims.len() + 1
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &DenseMatrix) -> Result<ForwardCache> {
        if x.cols() != self.arch.input_dim {
            return Err(GulfError::InvalidDimension(format!(
                "model expects {} input columns, got {}",
                self.arch.input_dim,
                x.cols()
            )));
        }
        let dims = self.arch.layer_dims();
        let last = dims.len() - 1;
        let mut inputs = Vec::with_capacity(dims.len());
        let mut pre = Vec::with_capacity(last);
        let mut cur = x.clone();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let (w, b) = self.layer(l);
            let mut z = DenseMatrix::zeros(cur.rows(), fan_out);
            for r in 0..cur.rows() {
                let xin = cur.row(r);
                let zr = z.row_mut(r);
                for (o, zo) in zr.iter_mut().enumerate() {
                    let wrow = &w[o * fan_in..(o + 1) * fan_in];
                    *zo = b[o] + wrow.iter().zip(xin).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            inputs.push(cur);
            if l == last {
                return Ok(ForwardCache {
                    inputs,
                    pre,
                    output: z,
                });
            }
            let mut a = z.clone();
            let act = self.arch.activation;
            for v in a.data_mut() {
                *v = act.apply(*v);
            }
            pre.push(z);
            cur = a;
        }
        unreachable!("an architecture always has an output layer")
    }

    /// `∇_θ Σᵢ grad_out[i]ᵀ f(θ; xᵢ)`.
    pub fn backward(&self, x: &DenseMatrix, grad_out: &DenseMatrix) -> Result<Vec<f64>> {
        let cache = self.forward_cached(x)?;
        self.backward_cached(&cache, grad_out)
    }

    pub fn backward_cached(&self, cache: &ForwardCache, grad_out: &DenseMatrix) -> Result<Vec<f64>> {
        let out = &cache.output;
        if grad_out.rows() != out.rows() || grad_out.cols() != out.cols() {
            return Err(GulfError::InvalidDimension(format!(
                "grad_out is {}x{}, forward output is {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let dims = self.arch.layer_dims();
        let offsets = self.arch.layer_offsets();
        let mut grad = vec![0.0; self.theta.len()];
        let mut delta = grad_out.clone();
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let input = &cache.inputs[l];
            let start = offsets[l];
            let (gw, gb) = grad[start..start + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..delta.rows() {
                let d = delta.row(r);
                let a = input.row(r);
                for o in 0..fan_out {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    let g = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for (gi, ai) in g.iter_mut().zip(a) {
                        *gi += dv * ai;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(l);
            let z = &cache.pre[l - 1];
            let mut next = DenseMatrix::zeros(delta.rows(), fan_in);
            let act = self.arch.activation;
            for r in 0..delta.rows() {
                let d = delta.row(r);
                let nr = next.row_mut(r);
                for o in 0..fan_out {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    for (ni, wi) in nr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *ni += dv * wi;
                    }
                }
                let zr = z.row(r);
                let ar = input.row(r);
                for i in 0..fan_in {
                    nr[i] *= act.derivative(zr[i], ar[i]);
                }
            }
            delta = next;
        }
        Ok(grad)
    }

    /// Divides the output layer's weights and bias by `v`.
    pub fn shrink_last_layer(&self, v: f64) -> Result<Self> {
        if !(v > 0.0) || !v.is_finite() {
            return Err(GulfError::InvalidParameter(format!(
                "shrink factor must be positive and finite, got {v}"
            )));
        }
        let last = self.num_layers() - 1;
        let start = self.arch.layer_offsets()[last];
        let mut theta = self.theta.clone();
        for t in &mut theta[start..] {
            *t /= v;
        }
        self.with_theta(theta)
    }

    pub fn param_norm_sq(&self) -> f64 {
        norm_sq(&self.theta)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            architecture: self.arch.clone(),
            theta: self.theta.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        ck.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk model: `{"architecture": {...}, "theta": [...]}`.
///
/// Floats are written in shortest round-trip form, so a save/load cycle
/// reproduces `theta` bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub architecture: MlpArchitecture,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<MlpModel> {
        MlpModel::from_theta(self.architecture, self.theta)
    }
}

/// Kaiming-style normal initialisation: weights `N(0, gain / fan_in)`, zero
/// biases.
pub fn init_random(arch: &MlpArchitecture, stream: &mut RngStream) -> Result<MlpModel> {
    arch.validate()?;
    let mut theta = Vec::with_capacity(arch.param_count());
    let gain = arch.activation.init_gain();
    for (fan_in, fan_out) in arch.layer_dims() {
        let std = (gain / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            theta.push(std * stream.next_normal());
        }
        theta.extend(std::iter::repeat(0.0).take(fan_out));
    }
    MlpModel::from_theta(arch.clone(), theta)
}
