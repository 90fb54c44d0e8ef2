#![allow(dead_code)]

use igdm_core::model::Layer;
use igdm_core::{init_mlp, Activation, Architecture, Mlp, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector(uniform_vec(rng, n, 0.0, 1.0))
}

pub fn mlp(dims: &[usize], k: usize, seed: u64) -> Mlp {
    let arch = Architecture::new(dims[0], dims[1..].to_vec(), k, Activation::Relu);
    init_mlp(&arch, seed).unwrap()
}

/// Zero-depth model `W x + b` with the given weights.
pub fn affine(w: Vec<f64>, b: Vec<f64>, d: usize) -> Mlp {
    let k = b.len();
    let arch = Architecture::new(d, vec![], k, Activation::Relu);
    Mlp::new(
        arch,
        ParamSet {
            layers: vec![Layer {
                weight: Tensor::matrix(k, d, w),
                bias: Tensor::vector(b),
            }],
        },
    )
    .unwrap()
}

pub fn random_affine(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Mlp {
    affine(uniform_vec(rng, k * d, -1.0, 1.0), uniform_vec(rng, k, -1.0, 1.0), d)
}

/// Explicit matrix-vector product `W x + b`.
pub fn affine_apply(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (k, d) = (w.rows(), w.cols());
    (0..k)
        .map(|i| {
            let mut acc = b.data()[i];
            for j in 0..d {
                acc += w.data()[i * d + j] * x[j];
            }
            acc
        })
        .collect()
}

/// Pre-activations of every hidden layer at `x`.
pub fn pre_activations(m: &Mlp, x: &[f64]) -> Vec<Vec<f64>> {
    let mut h = x.to_vec();
    let mut out = Vec::new();
    let n = m.params.layers.len();
    for (i, l) in m.params.layers.iter().enumerate() {
        let z = affine_apply(&l.weight, &l.bias, &h);
        if i + 1 < n {
            h = z.iter().map(|&v| v.max(0.0)).collect();
            out.push(z);
        }
    }
    out
}

pub fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / fd.abs().max(1.0)
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
