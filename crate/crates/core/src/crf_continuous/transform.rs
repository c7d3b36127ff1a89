//! Pointwise affine-chain transforms used as unary and pairwise nets.
//!
//! Weight files are TOML:
//!
//! ```toml
//! input_dim = 3            # needed only when there are no layers
//!
//! [[layer]]
//! activation = "leaky-relu" # identity | relu | leaky-relu
//! slope = 0.1               # leaky-relu only
//! weights = [[1.0, 0.0, 0.0],
//!            [0.0, 1.0, 0.0]] # one row per output, row-major
//! bias = [0.0, 0.0]
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, FeatureMatrix, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
        }
    }

    /// Derivative at `v`; the kink takes the left slope.
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }

    pub fn apply_all(self, m: &FeatureMatrix) -> FeatureMatrix {
        m.map(|v| self.apply(v))
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    /// `identity`, `relu`, `leaky-relu` (slope 0.1) or `leaky-relu:<slope>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "leaky-relu" => Ok(Activation::LeakyRelu(0.1)),
            other => {
                if let Some(slope) = other.strip_prefix("leaky-relu:") {
                    let slope: f64 = slope
                        .parse()
                        .map_err(|_| Error::Invalid(format!("bad leaky-relu slope {slope:?}")))?;
                    if !slope.is_finite() {
                        return Err(Error::Invalid("leaky-relu slope must be finite".into()));
                    }
                    Ok(Activation::LeakyRelu(slope))
                } else {
                    Err(Error::Invalid(format!("unknown activation {other:?}")))
                }
            }
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Identity => write!(f, "identity"),
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu(s) => write!(f, "leaky-relu:{s}"),
        }
    }
}

/// `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl AffineLayer {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} outputs",
                bias.len(),
                weight.nrows()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite layer parameter".into()));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// A chain of affine layers applied to every point independently.
/// With no layers it is the identity on `input_dim` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseTransform {
    input_dim: usize,
    layers: Vec<AffineLayer>,
}

/// Gradients of a scalar loss w.r.t. every layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl TransformGrad {
    pub fn zeros_like(t: &PointwiseTransform) -> Self {
        Self {
            weights: t
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.output_dim(), l.input_dim()))
                .collect(),
            biases: t.layers.iter().map(|l| DVector::zeros(l.output_dim())).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| *v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|v| *v == 0.0))
    }
}

/// Pre-activations of every layer, kept for the backward pass.
pub(crate) struct TransformTape {
    inputs: Vec<FeatureMatrix>,
    pre: Vec<FeatureMatrix>,
}

impl PointwiseTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layers: Vec::new(),
        }
    }

    pub fn new(layers: Vec<AffineLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Invalid("use PointwiseTransform::identity for an empty chain".into()))?;
        let input_dim = first.input_dim();
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} channels but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { input_dim, layers })
    }

    /// Single linear layer without bias or activation.
    pub fn linear(weight: DMatrix<f64>) -> Result<Self> {
        let out = weight.nrows();
        Self::new(vec![AffineLayer::new(weight, DVector::zeros(out), Activation::Identity)?])
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, AffineLayer::output_dim)
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AffineLayer] {
        &mut self.layers
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        Ok(self.forward_taped(x)?.0)
    }

    pub(crate) fn forward_taped(&self, x: &FeatureMatrix) -> Result<(FeatureMatrix, TransformTape)> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "transform expects {} input channels, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        let mut tape = TransformTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut pre = FeatureMatrix::zeros(cur.rows(), layer.output_dim());
            for i in 0..cur.rows() {
                let xi = cur.row(i);
                for (r, o) in pre.row_mut(i).iter_mut().enumerate() {
                    let mut acc = layer.bias[r];
                    for (c, v) in xi.iter().enumerate() {
                        acc += layer.weight[(r, c)] * v;
                    }
                    *o = acc;
                }
            }
            let next = layer.activation.apply_all(&pre);
            tape.inputs.push(cur);
            tape.pre.push(pre);
            cur = next;
        }
        Ok((cur, tape))
    }

    /// Backpropagates `upstream` (same shape as the output); returns the input cotangent
    /// and accumulates parameter gradients into `grad`.
    pub(crate) fn backward(
        &self,
        tape: &TransformTape,
        upstream: &FeatureMatrix,
        grad: &mut TransformGrad,
    ) -> FeatureMatrix {
        let mut g = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pre[l];
            let input = &tape.inputs[l];
            let mut dx = FeatureMatrix::zeros(g.rows(), layer.input_dim());
            for i in 0..g.rows() {
                for r in 0..layer.output_dim() {
                    let da = g.get(i, r) * layer.activation.derivative(pre.get(i, r));
                    if da == 0.0 {
                        continue;
                    }
                    grad.biases[l][r] += da;
                    for c in 0..layer.input_dim() {
                        grad.weights[l][(r, c)] += da * input.get(i, c);
                        dx.as_mut_slice()[i * layer.input_dim() + c] += layer.weight[(r, c)] * da;
                    }
                }
            }
            g = dx;
        }
        g
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TransformFile =
            toml::from_str(text).map_err(|e| Error::parse(toml_line(text, &e), e.message()))?;
        file.into_transform()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&TransformFile::from_transform(self)).expect("transform serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn toml_line(text: &str, e: &toml::de::Error) -> usize {
    e.span()
        .map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TransformFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, rename = "layer", skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct LayerFile {
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    pub weights: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
}

fn default_activation() -> String {
    "identity".into()
}

impl LayerFile {
    fn into_layer(self, index: usize) -> Result<AffineLayer> {
        let rows = self.weights.len();
        let cols = self.weights.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("layer {index} has an empty weight matrix")));
        }
        if self.weights.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape(format!("layer {index} has ragged weight rows")));
        }
        let weight = DMatrix::from_row_iterator(rows, cols, self.weights.into_iter().flatten());
        let bias = DVector::from_vec(self.bias.unwrap_or_else(|| vec![0.0; rows]));
        let activation = match (self.activation.as_str(), self.slope) {
            ("leaky-relu", Some(s)) => Activation::LeakyRelu(s),
            (_, Some(_)) => {
                return Err(Error::Invalid(format!(
                    "layer {index}: slope is only valid for leaky-relu"
                )))
            }
            (name, None) => name.parse()?,
        };
        AffineLayer::new(weight, bias, activation)
    }

    fn from_layer(l: &AffineLayer) -> Self {
        let (activation, slope) = match l.activation {
            Activation::LeakyRelu(s) => ("leaky-relu".to_string(), Some(s)),
            other => (other.to_string(), None),
        };
        Self {
            activation,
            slope,
            weights: (0..l.weight.nrows())
                .map(|r| l.weight.row(r).iter().copied().collect())
                .collect(),
            bias: Some(l.bias.iter().copied().collect()),
        }
    }
}

impl TransformFile {
    pub(crate) fn into_transform(self) -> Result<PointwiseTransform> {
        if self.layers.is_empty() {
            let dim = self
                .input_dim
                .ok_or_else(|| Error::Invalid("input_dim is required when there are no layers".into()))?;
            return Ok(PointwiseTransform::identity(dim));
        }
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(k, l)| l.into_layer(k))
            .collect::<Result<Vec<_>>>()?;
        let t = PointwiseTransform::new(layers)?;
        if let Some(d) = self.input_dim {
            if d != t.input_dim() {
                return Err(Error::Shape(format!(
                    "input_dim {d} disagrees with first layer width {}",
                    t.input_dim()
                )));
            }
        }
        Ok(t)
    }

    pub(crate) fn from_transform(t: &PointwiseTransform) -> Self {
        Self {
            input_dim: Some(t.input_dim),
            layers: t.layers.iter().map(LayerFile::from_layer).collect(),
        }
    }
}
