//! Datasets, seeded synthetic tasks and shuffled batching.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[n x d]`, one sample per row.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Valid range for every input entry; attacks clamp into it.
    pub input_range: (f64, f64),
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, input_range: (f64, f64)) -> Result<Self> {
        let ds = Dataset {
            inputs,
            labels,
            num_classes,
            input_range,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.rank() != 2 || self.inputs.rows() != self.labels.len() {
            return Err(Error::Shape {
                expected: alloc::vec![self.labels.len(), self.dim()],
                got: self.inputs.shape().to_vec(),
            });
        }
        if self.labels.is_empty() {
            return contract("dataset must hold at least one sample");
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return contract(format!("label {y} outside [0, {})", self.num_classes));
        }
        let (lo, hi) = self.input_range;
        if !(lo < hi) {
            return contract("input range must satisfy lo < hi");
        }
        if !self.inputs.all_finite() {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        if self.inputs.data().iter().any(|&v| v < lo || v > hi) {
            return contract(format!("input entry outside [{lo}, {hi}]"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn sample(&self, i: usize) -> Tensor {
        Tensor::vector(self.inputs.row(i).to_vec())
    }

    /// Rows and labels for the given indices, in order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        (
            Tensor::matrix(indices.len(), d, data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (inputs, labels) = self.gather(indices);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            input_range: self.input_range,
        }
    }

    /// Training part and the held-out last 20% (by original index).
    pub fn split_holdout(&self) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        if n < 2 {
            return contract("need at least two samples to hold some out");
        }
        let held = (n / 5).max(1);
        let cut = n - held;
        let train: Vec<usize> = (0..cut).collect();
        let test: Vec<usize> = (cut..n).collect();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianMixture,
    TwoSpirals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return config("synthetic dim must be at least 2");
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return config("noise_scale must be finite and non-negative");
        }
        if self.num_classes < 2 || self.samples_per_class == 0 {
            return config("need at least 2 classes and 1 sample per class");
        }
        if self.kind == SyntheticKind::TwoSpirals && self.num_classes != 2 {
            return config(format!("two_spirals has exactly 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }
}

/// Seeded synthetic task, rescaled into `[0, 1]`.
///
/// Classes are interleaved (sample `i` has label `i % K`), so any contiguous
/// index range is class-balanced up to rounding.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_classes;
    let n = k * spec.samples_per_class;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let unit = Uniform::new(0.0, 1.0).expect("unit interval");
    let mut raw = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        let (cx, cy) = match spec.kind {
            SyntheticKind::GaussianMixture => {
                let angle = 2.0 * PI * y as f64 / k as f64;
                (libm::cos(angle), libm::sin(angle))
            }
            SyntheticKind::TwoSpirals => {
                // radius grows with the angle; the second arm is the first rotated by pi
                let t = libm::sqrt(unit.sample(&mut rng));
                let angle = 3.0 * PI * t;
                let sign = if y == 0 { 1.0 } else { -1.0 };
                (sign * t * libm::cos(angle), sign * t * libm::sin(angle))
            }
        };
        for j in 0..d {
            let base = match j {
                0 => cx,
                1 => cy,
                _ => 0.0,
            };
            let z: f64 = noise.sample(&mut rng);
            raw.push(base + spec.noise_scale * z);
        }
        labels.push(y);
    }
    let lo = raw.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let hi = raw.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let span = hi - lo;
    for v in &mut raw {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.5 };
    }
    Dataset::new(Tensor::matrix(n, d, raw), labels, k, (0.0, 1.0))
}

/// Seeded permutation of `0..n` for `(seed, epoch)`, cut into slices of `batch_size`.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return contract(format!("batch size {batch_size} outside [1, {n}]"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xba7c, epoch));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
