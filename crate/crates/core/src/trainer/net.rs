use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "none")]
    Linear,
}

/// `y = act(x W + b)` with `W` of shape `d_in x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Fully connected ReLU network with a linear output layer.
///
/// Every mutable access bumps a generation counter; a [`ForwardCache`]
/// taken before the bump is rejected by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    generation: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub layers: Vec<LayerGradients>,
    pub input: Array2<f64>,
}

/// Xavier-uniform `fan_in x fan_out` matrix.
pub fn xavier_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound))
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim() == 0 || l.out_dim() == 0 || l.bias.len() != l.out_dim() {
                return Err(Error::invalid(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(DenseNet { layers, generation: 0 })
    }

    /// `dims = [input, hidden.., embedding]`: ReLU after every layer but the
    /// last, Xavier-uniform weights and zero biases.
    pub fn xavier<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                weights: xavier_uniform(w[0], w[1], rng),
                bias: Array1::zeros(w[1]),
                activation: if i == last { Activation::Linear } else { Activation::Relu },
            })
            .collect();
        DenseNet::new(layers)
    }

    /// Single linear layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Result<Self> {
        DenseNet::new(vec![DenseLayer {
            weights: Array2::eye(dim),
            bias: Array1::zeros(dim),
            activation: Activation::Linear,
        }])
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Batch forward pass; rows of `x` are samples.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let z = h.dot(&l.weights) + &l.bias;
            let out = match l.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Linear => z.clone(),
            };
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                generation: self.generation,
                inputs,
                pre,
            },
        ))
    }

    pub fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Parameter and input gradients given `d objective / d output`.
    /// The ReLU subgradient at 0 is taken as 0.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Result<NetGradients> {
        if cache.generation != self.generation {
            return Err(Error::InvalidState(format!(
                "forward cache from generation {} used after parameters changed (now {})",
                cache.generation, self.generation
            )));
        }
        let rows = cache.inputs[0].nrows();
        if grad_out.dim() != (rows, self.embedding_dim()) {
            return Err(Error::invalid(format!(
                "output gradient has shape {:?}, expected ({rows}, {})",
                grad_out.dim(),
                self.embedding_dim()
            )));
        }
        let mut g = grad_out.to_owned();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Relu {
                g.zip_mut_with(&cache.pre[i], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            layers.push(LayerGradients {
                weights: cache.inputs[i].t().dot(&g),
                bias: g.sum_axis(Axis(0)),
            });
            g = g.dot(&l.weights.t());
        }
        layers.reverse();
        Ok(NetGradients { layers, input: g })
    }
}
