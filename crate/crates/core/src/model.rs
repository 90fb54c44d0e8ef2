//! Multilayer-perceptron classifiers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::gradcheck;
use crate::tape::{LeafKind, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize, activation: Activation) -> Self {
        Architecture {
            input_dim,
            hidden,
            num_classes,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return config("layer widths must be positive");
        }
        if self.num_classes < 2 {
            return config(format!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine layer; `weight` is `[fan_out x fan_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn zeros(arch: &Architecture) -> Self {
        ParamSet {
            layers: arch
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Layer {
                    weight: Tensor::zeros(&[o, i]),
                    bias: Tensor::zeros(&[o]),
                })
                .collect(),
        }
    }

    /// Weight then bias, layer by layer.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn to_bits(&self) -> Vec<u64> {
        self.tensors().flat_map(|t| t.to_bits()).collect()
    }

    pub fn check_against(&self, arch: &Architecture) -> Result<()> {
        let dims = arch.layer_dims();
        if dims.len() != self.layers.len() {
            return config(format!(
                "parameter set has {} layers, architecture needs {}",
                self.layers.len(),
                dims.len()
            ));
        }
        for (layer, (i, o)) in self.layers.iter().zip(dims) {
            layer.weight.expect_shape(&[o, i])?;
            layer.bias.expect_shape(&[o])?;
            if !layer.weight.all_finite() || !layer.bias.all_finite() {
                return Err(Error::NonFinite("parameter set".into()));
            }
        }
        Ok(())
    }
}

/// Parameters bound as leaves of a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    leaves: Vec<(NodeId, NodeId)>,
    transposed: Vec<NodeId>,
    activation: Activation,
    input_dim: usize,
}

impl BoundMlp {
    /// Weight and bias leaves in [`ParamSet::tensors`] order.
    pub fn param_leaves(&self) -> Vec<NodeId> {
        self.leaves.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Logits for a `[b x d]` batch (returns `[b x k]`) or a `d`-vector (returns `[k]`).
    pub fn logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        let vector = shape.len() == 1;
        if shape.last() != Some(&self.input_dim) || shape.len() > 2 {
            return Err(Error::Shape {
                expected: vec![self.input_dim],
                got: shape,
            });
        }
        let mut h = if vector { tape.reshape(x, &[1, self.input_dim])? } else { x };
        let last = self.leaves.len() - 1;
        for (i, (&(_, b), &wt)) in self.leaves.iter().zip(&self.transposed).enumerate() {
            let z = tape.matmul(h, wt)?;
            h = tape.add_row(z, b)?;
            if i != last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h)?,
                    Activation::Softplus => tape.softplus(h)?,
                };
            }
        }
        if vector {
            let k = tape.value(h).len();
            h = tape.reshape(h, &[k])?;
        }
        Ok(h)
    }
}

/// Architecture plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub arch: Architecture,
    pub params: ParamSet,
}

/// Glorot-uniform weights, zero biases; identical seeds give identical bits.
pub fn init_mlp(arch: &Architecture, seed: u64) -> Result<Mlp> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Layer {
                weight: Tensor::matrix(fan_out, fan_in, w),
                bias: Tensor::zeros(&[fan_out]),
            }
        })
        .collect();
    Ok(Mlp {
        arch: arch.clone(),
        params: ParamSet { layers },
    })
}

/// Output of a recorded forward pass.
pub struct Recorded {
    pub tape: Tape,
    pub input: NodeId,
    pub params: BoundMlp,
    pub logits: NodeId,
}

impl Mlp {
    pub fn new(arch: Architecture, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        params.check_against(&arch)?;
        Ok(Mlp { arch, params })
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Binds every parameter tensor as a leaf of the given kind.
    pub fn bind(&self, tape: &mut Tape, kind: LeafKind) -> Result<BoundMlp> {
        let mut leaves = Vec::with_capacity(self.params.layers.len());
        let mut transposed = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let w = tape.leaf(layer.weight.clone(), kind);
            let b = tape.leaf(layer.bias.clone(), kind);
            transposed.push(tape.transpose(w)?);
            leaves.push((w, b));
        }
        Ok(BoundMlp {
            leaves,
            transposed,
            activation: self.arch.activation,
            input_dim: self.arch.input_dim,
        })
    }

    /// Logits of a single `d`-vector.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 1 {
            return Err(Error::Shape {
                expected: vec![self.arch.input_dim],
                got: x.shape().to_vec(),
            });
        }
        Ok(self.forward_recorded(x)?.into_logits())
    }

    /// Forward pass that keeps the tape; `x` is an input leaf, parameters are param leaves.
    pub fn forward_recorded(&self, x: &Tensor) -> Result<Recorded> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, LeafKind::Param)?;
        let input = tape.input(x.clone());
        let logits = params.logits(&mut tape, input)?;
        Ok(Recorded {
            tape,
            input,
            params,
            logits,
        })
    }

    /// Logits for a `[b x d]` batch.
    pub fn logits_batch(&self, xs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, LeafKind::Constant)?;
        let input = tape.constant(xs.clone());
        let logits = params.logits(&mut tape, input)?;
        Ok(tape.value(logits).clone())
    }

    /// `[k x d]` Jacobian of the logits at `x`.
    pub fn input_jacobian(&self, x: &Tensor) -> Result<Tensor> {
        let f = |tape: &mut Tape, input: NodeId| {
            let p = self.bind(tape, LeafKind::Constant)?;
            p.logits(tape, input)
        };
        gradcheck::input_jacobian(&f, x)
    }

    /// Per-row logit Jacobians for a `[b x d]` batch.
    pub fn batch_input_jacobians(&self, xs: &Tensor) -> Result<Vec<Tensor>> {
        let f = |tape: &mut Tape, input: NodeId| {
            let p = self.bind(tape, LeafKind::Constant)?;
            p.logits(tape, input)
        };
        gradcheck::batch_input_jacobians(&f, xs)
    }

    /// Copy with the final layer (weights and bias) multiplied by `c`.
    pub fn with_output_scale(&self, c: f64) -> Mlp {
        let mut out = self.clone();
        if let Some(last) = out.params.layers.last_mut() {
            last.weight = last.weight.scale(c);
            last.bias = last.bias.scale(c);
        }
        out
    }
}

impl Recorded {
    pub fn into_logits(self) -> Tensor {
        self.tape.value(self.logits).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(hidden: Vec<usize>) -> Architecture {
        Architecture::new(2, hidden, 2, Activation::Relu)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = arch(vec![8]);
        let m1 = init_mlp(&a, 7).unwrap();
        let m2 = init_mlp(&a, 7).unwrap();
        assert_eq!(m1.params.to_bits(), m2.params.to_bits());
        assert_ne!(m1.params, init_mlp(&a, 8).unwrap().params);
        for l in &m1.params.layers {
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_respects_glorot_bounds() {
        let m = init_mlp(&arch(vec![8]), 7).unwrap();
        for (l, (i, o)) in m.params.layers.iter().zip(m.arch.layer_dims()) {
            let bound = libm::sqrt(6.0 / (i + o) as f64);
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn zero_depth_model_is_affine() {
        let a = arch(vec![]);
        let mut m = init_mlp(&a, 1).unwrap();
        m.params.layers[0].bias = Tensor::vector(vec![0.5, -0.25]);
        let x = Tensor::vector(vec![0.3, 0.9]);
        let w = &m.params.layers[0].weight;
        let expected = w.matvec(&x).unwrap().add(&m.params.layers[0].bias).unwrap();
        assert_eq!(m.forward(&x).unwrap(), expected);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = init_mlp(&arch(vec![4]), 1).unwrap();
        assert!(matches!(
            m.forward(&Tensor::vector(vec![1.0, 2.0, 3.0])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn invalid_architectures() {
        assert!(init_mlp(&Architecture::new(2, vec![], 1, Activation::Relu), 0).is_err());
        assert!(init_mlp(&Architecture::new(2, vec![0], 2, Activation::Relu), 0).is_err());
        assert!(init_mlp(&Architecture::new(0, vec![], 2, Activation::Relu), 0).is_err());
    }

    #[test]
    fn single_and_batch_forward_agree_bitwise() {
        let m = init_mlp(&Architecture::new(3, vec![5, 4], 3, Activation::Softplus), 3).unwrap();
        let rows = [[0.1, 0.2, 0.3], [0.9, -0.5, 0.0]];
        let batch = Tensor::matrix(2, 3, rows.concat());
        let out = m.logits_batch(&batch).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = m.forward(&Tensor::vector(r.to_vec())).unwrap();
            assert_eq!(single.to_bits(), Tensor::vector(out.row(i).to_vec()).to_bits());
        }
    }
}
