//! Feedforward network model: shape, smoothed ramp activation, flattened
//! parameter vector and the forward pass.
//!
//! Parameters are flattened layer-major. Within layer `l` the weight matrix
//! `W_l` (shape `M_l x M_{l-1}`) is stored row-major and followed by the bias
//! `b_l`, so every layer occupies one contiguous slice of `Z`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default half-width of the smoothing window around the ramp kink.
pub const DEFAULT_EPSILON: f64 = 1e-2;

/// Layer dimensions `M, M_1..M_L, Q`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

/// Position of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    /// Offset of `W_l[0, 0]` in `Z`.
    pub offset: usize,
    /// Output width `M_l`.
    pub rows: usize,
    /// Input width `M_{l-1}`.
    pub cols: usize,
}

impl LayerLayout {
    pub fn weight_index(&self, row: usize, col: usize) -> usize {
        self.offset + row * self.cols + col
    }

    pub fn bias_index(&self, row: usize) -> usize {
        self.offset + self.rows * self.cols + row
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let shape = Self {
            input_dim,
            hidden_dims,
            output_dim,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidShape(
                "input and output dimensions must be >= 1".into(),
            ));
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "hidden layer {} has width 0",
                pos + 1
            )));
        }
        if self.output_dim > self.input_dim {
            return Err(Error::InvalidShape(format!(
                "output dimension Q = {} exceeds input dimension M = {}",
                self.output_dim, self.input_dim
            )));
        }
        Ok(())
    }

    /// `[M, M_1, .., M_L, Q]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }

    /// Number of hidden layers `L`.
    pub fn hidden_layers(&self) -> usize {
        self.hidden_dims.len()
    }

    /// Number of affine layers, `L + 1`.
    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `K = sum_{l=1}^{L+1} (M_l M_{l-1} + M_l)`.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    pub fn layouts(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_dims()
            .windows(2)
            .map(|w| {
                let layout = LayerLayout {
                    offset,
                    rows: w[1],
                    cols: w[0],
                };
                offset += layout.len();
                layout
            })
            .collect()
    }

    /// Layout of layer `l` without building the full list.
    pub fn layout(&self, l: usize) -> LayerLayout {
        let dim = |i: usize| match i {
            0 => self.input_dim,
            i if i <= self.hidden_dims.len() => self.hidden_dims[i - 1],
            _ => self.output_dim,
        };
        assert!(l < self.num_layers(), "layer {l} out of range");
        let offset = (0..l).map(|i| dim(i + 1) * dim(i) + dim(i + 1)).sum();
        LayerLayout {
            offset,
            rows: dim(l + 1),
            cols: dim(l),
        }
    }
}

/// Smoothed ramp `sigma_eps`: zero below `-eps`, identity above `eps`, and the
/// quadratic `(xi + eps)^2 / (4 eps)` in between. C1 with a `1/(2 eps)`-Lipschitz
/// derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    epsilon: f64,
}

impl Default for Activation {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl Activation {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "activation epsilon must be positive and finite, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    // Branches are left-closed: [-eps, eps) is the blend, [eps, inf) is linear.
    pub fn value(&self, xi: f64) -> f64 {
        let eps = self.epsilon;
        if xi < -eps {
            0.0
        } else if xi < eps {
            (xi + eps) * (xi + eps) / (4.0 * eps)
        } else {
            xi
        }
    }

    pub fn derivative(&self, xi: f64) -> f64 {
        let eps = self.epsilon;
        if xi < -eps {
            0.0
        } else if xi < eps {
            (xi + eps) / (2.0 * eps)
        } else {
            1.0
        }
    }
}

/// Flattened weights and biases `Z` of a network with a given shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    shape: NetworkShape,
    z: Vec<f64>,
}

/// One affine layer in unflattened form. `weights` is row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Borrowed view of one layer's slice of `Z`.
#[derive(Debug, Clone, Copy)]
pub struct LayerRef<'a> {
    pub rows: usize,
    pub cols: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

impl ParamVector {
    pub fn zeros(shape: &NetworkShape) -> Self {
        Self {
            z: vec![0.0; shape.param_count()],
            shape: shape.clone(),
        }
    }

    pub fn from_vec(shape: &NetworkShape, z: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let k = shape.param_count();
        if z.len() != k {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: k,
                found: z.len(),
            });
        }
        Ok(Self {
            shape: shape.clone(),
            z,
        })
    }

    /// Gaussian entries with standard deviation `1/sqrt(fan_in)` per layer,
    /// applied to weights and biases alike.
    pub fn sample_gaussian<R: Rng + ?Sized>(shape: &NetworkShape, rng: &mut R) -> Self {
        let mut z = Vec::with_capacity(shape.param_count());
        for layout in shape.layouts() {
            let normal = Normal::new(0.0, 1.0 / (layout.cols as f64).sqrt())
                .expect("fan-in is positive");
            z.extend((0..layout.len()).map(|_| normal.sample(rng)));
        }
        Self {
            shape: shape.clone(),
            z,
        }
    }

    pub fn from_layers(shape: &NetworkShape, layers: &[LayerParams]) -> Result<Self> {
        let layouts = shape.layouts();
        if layers.len() != layouts.len() {
            return Err(Error::DimensionMismatch {
                what: "layer count",
                expected: layouts.len(),
                found: layers.len(),
            });
        }
        let mut z = Vec::with_capacity(shape.param_count());
        for (layer, layout) in layers.iter().zip(&layouts) {
            if layer.rows != layout.rows
                || layer.cols != layout.cols
                || layer.weights.len() != layout.rows * layout.cols
                || layer.bias.len() != layout.rows
            {
                return Err(Error::InvalidShape(format!(
                    "layer params {}x{} do not match layout {}x{}",
                    layer.rows, layer.cols, layout.rows, layout.cols
                )));
            }
            z.extend_from_slice(&layer.weights);
            z.extend_from_slice(&layer.bias);
        }
        Self::from_vec(shape, z)
    }

    pub fn unflatten(&self) -> Vec<LayerParams> {
        (0..self.shape.num_layers())
            .map(|l| {
                let layer = self.layer(l);
                LayerParams {
                    rows: layer.rows,
                    cols: layer.cols,
                    weights: layer.weights.to_vec(),
                    bias: layer.bias.to_vec(),
                }
            })
            .collect()
    }

    /// Layer `l` counted from 0 (the first hidden layer) to `L` (the output layer).
    pub fn layer(&self, l: usize) -> LayerRef<'_> {
        let layout = self.shape.layout(l);
        let start = layout.offset;
        let mid = start + layout.rows * layout.cols;
        LayerRef {
            rows: layout.rows,
            cols: layout.cols,
            weights: &self.z[start..mid],
            bias: &self.z[mid..mid + layout.rows],
        }
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.z
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Training inputs `x_{j,0}`, output vectors `y_1..y_Q` and the label map `omega`.
///
/// Labels are stored 0-based; the JSON format uses 1-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidDataset("no training inputs".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let m = inputs[0].len();
        if m == 0 {
            return Err(Error::InvalidDataset("inputs have dimension 0".into()));
        }
        if let Some(j) = inputs.iter().position(|x| x.len() != m) {
            return Err(Error::InvalidDataset(format!(
                "input {} has dimension {}, expected {m}",
                j + 1,
                inputs[j].len()
            )));
        }
        let q = outputs.len();
        if q == 0 {
            return Err(Error::InvalidDataset("no output vectors".into()));
        }
        if let Some(i) = outputs.iter().position(|y| y.len() != q) {
            return Err(Error::InvalidDataset(format!(
                "output vector {} has length {}, expected Q = {q}",
                i + 1,
                outputs[i].len()
            )));
        }
        if let Some(j) = labels.iter().position(|&l| l >= q) {
            return Err(Error::InvalidDataset(format!(
                "label of input {} is out of range 1..={q}",
                j + 1
            )));
        }
        let finite = inputs.iter().chain(&outputs).flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Self {
            inputs,
            outputs,
            labels,
        })
    }

    /// Number of training inputs `N`.
    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    /// Output dimension `Q` (also the number of output vectors).
    pub fn q(&self) -> usize {
        self.outputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Length `QN` of stacked output vectors.
    pub fn stacked_len(&self) -> usize {
        self.n() * self.q()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    /// 0-based labels.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `y_{omega(j)}`.
    pub fn target(&self, j: usize) -> &[f64] {
        &self.outputs[self.labels[j]]
    }

    /// `N_i` for each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.q()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// `y_omega = (y_{omega(1)}, .., y_{omega(N)})`, length `QN`.
    pub fn stacked_targets(&self) -> Vec<f64> {
        (0..self.n()).flat_map(|j| self.target(j).iter().copied()).collect()
    }

    /// Reorders the samples so that sample `j` of the result is sample `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n()];
        if perm.len() != self.n() || perm.iter().any(|&p| p >= self.n() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("not a permutation of the samples".into()));
        }
        Ok(Self {
            inputs: perm.iter().map(|&p| self.inputs[p].clone()).collect(),
            outputs: self.outputs.clone(),
            labels: perm.iter().map(|&p| self.labels[p]).collect(),
        })
    }

    pub fn check_compatible(&self, shape: &NetworkShape) -> Result<()> {
        if self.input_dim() != shape.input_dim {
            return Err(Error::DimensionMismatch {
                what: "dataset input dimension",
                expected: shape.input_dim,
                found: self.input_dim(),
            });
        }
        if self.q() != shape.output_dim {
            return Err(Error::DimensionMismatch {
                what: "dataset output dimension",
                expected: shape.output_dim,
                found: self.q(),
            });
        }
        Ok(())
    }
}

/// Per-layer record of one forward evaluation, reused by the backward sweeps.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `pre[l] = W_{l+1} x^{(l)} + b_{l+1}` for every affine layer.
    pub pre: Vec<Vec<f64>>,
    /// `act[0] = x_0`, `act[l] = sigma(pre[l-1])` for hidden layers, last entry is the output.
    pub act: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        self.act.last().expect("forward pass has at least one layer")
    }
}

/// A network shape together with its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub shape: NetworkShape,
    pub activation: Activation,
}

impl Network {
    pub fn new(shape: NetworkShape, activation: Activation) -> Result<Self> {
        shape.validate()?;
        Ok(Self { shape, activation })
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    pub(crate) fn check_params(&self, z: &ParamVector) -> Result<()> {
        if z.shape() != &self.shape {
            return Err(Error::InvalidShape(
                "parameter vector belongs to a different network shape".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_data(&self, data: &Dataset) -> Result<()> {
        data.check_compatible(&self.shape)
    }

    pub fn forward(&self, z: &ParamVector, x0: &[f64]) -> Result<ForwardPass> {
        self.check_params(z)?;
        if x0.len() != self.shape.input_dim {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.shape.input_dim,
                found: x0.len(),
            });
        }
        Ok(self.forward_unchecked(z, x0))
    }

    pub(crate) fn forward_unchecked(&self, z: &ParamVector, x0: &[f64]) -> ForwardPass {
        let layers = self.shape.num_layers();
        let mut pre = Vec::with_capacity(layers);
        let mut act = Vec::with_capacity(layers + 1);
        act.push(x0.to_vec());
        for l in 0..layers {
            let layer = z.layer(l);
            let input = &act[l];
            let p: Vec<f64> = (0..layer.rows)
                .map(|r| {
                    let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                    row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + layer.bias[r]
                })
                .collect();
            let a = if l + 1 < layers {
                p.iter().map(|&v| self.activation.value(v)).collect()
            } else {
                p.clone()
            };
            pre.push(p);
            act.push(a);
        }
        ForwardPass { pre, act }
    }

    /// Stacked outputs `(x_1[Z], .., x_N[Z])`, length `QN`.
    pub fn forward_all(&self, z: &ParamVector, data: &Dataset) -> Result<Vec<f64>> {
        self.check_params(z)?;
        self.check_data(data)?;
        let mut ux = Vec::with_capacity(data.stacked_len());
        for x0 in data.inputs() {
            ux.extend_from_slice(self.forward_unchecked(z, x0).output());
        }
        Ok(ux)
    }
}
