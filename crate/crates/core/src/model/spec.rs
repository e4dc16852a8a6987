use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputKind {
    CategoricalSoftmax,
    /// Gaussian likelihood with a fixed, user supplied standard deviation.
    GaussianFixedSigma { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub head_dim: usize,
    pub activation: Activation,
    pub output_kind: OutputKind,
}

/// One dense layer inside the flat parameter vector. Weights are stored
/// row-major as `[fan_out][fan_in]`, followed by `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_count(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_count()
    }

    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        head_dim: usize,
        activation: Activation,
        output_kind: OutputKind,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_widths,
            head_dim,
            activation,
            output_kind,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.head_dim == 0 {
            return Err(Error::invalid("input_dim and head_dim must be positive"));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if let OutputKind::GaussianFixedSigma { sigma } = self.output_kind {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::invalid("gaussian output sigma must be positive"));
            }
            if self.head_dim != 1 {
                return Err(Error::invalid("gaussian output requires head_dim = 1"));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.head_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let l = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += l.len();
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::len).sum()
    }

    /// Width of the feature map feeding the head.
    pub fn feature_dim(&self) -> usize {
        self.hidden_widths.last().copied().unwrap_or(self.input_dim)
    }

    /// Index of the first head coordinate.
    pub fn backbone_boundary(&self) -> usize {
        self.param_count() - (self.feature_dim() + 1) * self.head_dim
    }

    pub fn with_head_dim(&self, head_dim: usize) -> Self {
        Self {
            head_dim,
            ..self.clone()
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        for layer in self.layers() {
            init_layer(&mut values, layer, rng);
        }
        ParamVector::new(values, self.backbone_boundary())
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, spec expects {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }
}

pub(crate) fn init_layer<R: Rng + ?Sized>(values: &mut [f64], layer: LayerShape, rng: &mut R) {
    let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
    for v in &mut values[layer.offset..layer.bias_offset()] {
        *v = rng.random_range(-limit..limit);
    }
    for v in &mut values[layer.bias_offset()..layer.offset + layer.len()] {
        *v = 0.0;
    }
}

/// Flat parameters `w = (θ, v)`: backbone coordinates first, the head's
/// weights and biases as one contiguous block at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    backbone_len: usize,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, backbone_len: usize) -> Self {
        assert!(backbone_len <= values.len(), "boundary beyond parameter vector");
        Self {
            values,
            backbone_len,
        }
    }

    /// Every coordinate treated as backbone (no frozen head).
    pub fn all_backbone(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(values, n)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn backbone_len(&self) -> usize {
        self.backbone_len
    }

    pub fn is_backbone(&self, i: usize) -> bool {
        i < self.backbone_len
    }

    /// `true` for backbone coordinates, `false` for head coordinates.
    pub fn backbone_mask(&self) -> Vec<bool> {
        (0..self.values.len()).map(|i| self.is_backbone(i)).collect()
    }

    pub fn backbone(&self) -> &[f64] {
        &self.values[..self.backbone_len]
    }

    pub fn head(&self) -> &[f64] {
        &self.values[self.backbone_len..]
    }

    /// Swap in a new head block (possibly of a different size). Backbone
    /// coordinates are copied bitwise.
    pub fn with_head(&self, head: &[f64]) -> Self {
        let mut values = Vec::with_capacity(self.backbone_len + head.len());
        values.extend_from_slice(self.backbone());
        values.extend_from_slice(head);
        Self::new(values, self.backbone_len)
    }

    /// Re-initialize the head for `new_spec` (same backbone, new head size).
    pub fn reinit_head<R: Rng + ?Sized>(&self, new_spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        if new_spec.backbone_boundary() != self.backbone_len {
            return Err(Error::invalid("new spec does not share this backbone"));
        }
        let head_layer = *new_spec.layers().last().expect("at least one layer");
        let mut values = vec![0.0; new_spec.param_count()];
        values[..self.backbone_len].copy_from_slice(self.backbone());
        init_layer(&mut values, head_layer, rng);
        Ok(Self::new(values, self.backbone_len))
    }
}
