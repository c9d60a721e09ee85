use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::matrix::Matrix;
use super::params::{ParamVisitor, ParamVisitorMut, Parameterized};
use crate::error::{Error, Result};

/// Negative slope of the default hidden activation.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    LeakyRelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `input_dim x output_dim`; inputs are row vectors.
    pub weight: Matrix,
    /// `1 x output_dim` when present.
    pub bias: Option<Matrix>,
    pub activation: Activation,
}

/// A stack of dense layers applied to row-vector inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    layers: Vec<DenseLayer>,
}

impl MlpWeights {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("mlp needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if let Some(b) = &l.bias {
                if b.shape() != (1, l.weight.cols()) {
                    return Err(Error::invalid(format!("layer {i}: bias shape mismatch")));
                }
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::invalid(format!(
                    "layer {i}: input dim {} does not chain with previous output {}",
                    l.weight.rows(),
                    layers[i - 1].weight.cols()
                )));
            }
        }
        Ok(MlpWeights { layers })
    }

    /// A single bias-free identity-activation layer.
    pub fn pure_linear(weight: Matrix) -> Self {
        MlpWeights {
            layers: vec![DenseLayer {
                weight,
                bias: None,
                activation: Activation::Identity,
            }],
        }
    }

    /// Randomly initialised MLP through `dims` (`dims.len() - 1` layers).
    /// Hidden layers use the leaky ramp; the last layer is linear.
    pub fn random(dims: &[usize], gain: f64, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = gain * (2.0 / w[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let last = i == dims.len() - 2;
                DenseLayer {
                    weight: Matrix::from_fn(w[0], w[1], |_, _| normal.sample(rng)),
                    bias: Some(Matrix::zeros(1, w[1])),
                    activation: if last {
                        Activation::Identity
                    } else {
                        Activation::LeakyRelu
                    },
                }
            })
            .collect();
        MlpWeights { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn is_pure_linear(&self) -> bool {
        self.layers.len() == 1
            && self.layers[0].bias.is_none()
            && self.layers[0].activation == Activation::Identity
    }

    /// Forward pass outside any graph.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for l in &self.layers {
            h = h.matmul(&l.weight)?;
            if let Some(b) = &l.bias {
                for r in 0..h.rows() {
                    for (o, bi) in h.row_mut(r).iter_mut().zip(b.as_slice()) {
                        *o += bi;
                    }
                }
            }
            if l.activation == Activation::LeakyRelu {
                h = h.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            }
        }
        Ok(h)
    }

    /// Registers the layers as named parameters of `g`.
    pub fn bind(&self, g: &mut Graph, prefix: &str) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| BoundLayer {
                weight: g.param(&format!("{prefix}.{i}.weight"), &l.weight),
                bias: l
                    .bias
                    .as_ref()
                    .map(|b| g.param(&format!("{prefix}.{i}.bias"), b)),
                activation: l.activation,
            })
            .collect();
        BoundMlp { layers }
    }
}

impl Parameterized for MlpWeights {
    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("{prefix}.{i}.weight"), &l.weight);
            if let Some(b) = &l.bias {
                f(&format!("{prefix}.{i}.bias"), b);
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}.{i}.weight"), &mut l.weight);
            if let Some(b) = &mut l.bias {
                f(&format!("{prefix}.{i}.bias"), b);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundLayer {
    weight: Var,
    bias: Option<Var>,
    activation: Activation,
}

/// An MLP whose weights live on a particular [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
}

/// Applies `w` to the rows of `x`.
pub fn mlp_forward(g: &mut Graph, w: &BoundMlp, x: Var) -> Result<Var> {
    let mut h = x;
    for l in &w.layers {
        h = g.matmul(h, l.weight)?;
        if let Some(b) = l.bias {
            h = g.add_row(h, b)?;
        }
        if l.activation == Activation::LeakyRelu {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    Ok(h)
}
