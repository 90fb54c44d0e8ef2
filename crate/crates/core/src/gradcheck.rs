//! Input Jacobians and the central-difference gradient check.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Builds a graph on `tape` from the given input leaf and returns the output node.
pub trait GraphFn: Fn(&mut Tape, NodeId) -> Result<NodeId> {}
impl<F: Fn(&mut Tape, NodeId) -> Result<NodeId>> GraphFn for F {}

fn eval_scalar(f: &impl GraphFn, point: Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(point);
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return contract("scalar function produced a non-scalar output");
    }
    Ok(tape.value(y).item())
}

/// Central-difference estimate of the gradient of a scalar graph.
pub fn central_difference(f: &impl GraphFn, point: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return contract("finite-difference step must be positive");
    }
    let mut out = vec![0.0; point.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        *o = (eval_scalar(f, plus)? - eval_scalar(f, minus)?) / (2.0 * h);
    }
    Ok(Tensor::new(point.shape().to_vec(), out))
}

/// Max over coordinates of `|analytic - fd| / max(1, |fd|)`.
///
/// Nonsmooth points (ReLU kinks, `|x|` at 0) show up as large errors; callers
/// exclude them.
pub fn finite_diff_check(f: &impl GraphFn, point: &Tensor, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return contract("finite-difference step must be positive");
    }
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backprop_scalar(y, &[x])?.remove(x).expect("requested leaf");
    let numeric = central_difference(f, point, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0, |acc: f64, (&a, &n)| acc.max((a - n).abs() / n.abs().max(1.0))))
}

/// `[k x d]` Jacobian of a vector-valued graph at a `d`-vector, one reverse pass per output.
pub fn input_jacobian(f: &impl GraphFn, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::Shape {
            expected: vec![x.len()],
            got: x.shape().to_vec(),
        });
    }
    let d = x.len();
    let mut tape = Tape::new();
    let leaf = tape.input(x.clone());
    let out = f(&mut tape, leaf)?;
    let out_shape = tape.value(out).shape().to_vec();
    let k = tape.value(out).len();
    let mut data = Vec::with_capacity(k * d);
    for row in 0..k {
        let mut seed = Tensor::zeros(&out_shape);
        seed.data_mut()[row] = 1.0;
        let g = tape.backprop_seeded(out, seed, &[leaf])?;
        data.extend_from_slice(g.get(leaf).expect("requested leaf").data());
    }
    Ok(Tensor::matrix(k, d, data))
}

/// Per-row Jacobians of a row-independent graph mapping `[b x d]` to `[b x k]`.
///
/// Uses `k` reverse passes over the whole batch; valid only when row `i` of the
/// output depends on row `i` of the input alone.
pub fn batch_input_jacobians(f: &impl GraphFn, xs: &Tensor) -> Result<Vec<Tensor>> {
    if xs.rank() != 2 {
        return Err(Error::Shape {
            expected: vec![0, 0],
            got: xs.shape().to_vec(),
        });
    }
    let (b, d) = (xs.shape()[0], xs.shape()[1]);
    let mut tape = Tape::new();
    let leaf = tape.input(xs.clone());
    let out = f(&mut tape, leaf)?;
    let out_shape = tape.value(out).shape().to_vec();
    if out_shape.len() != 2 || out_shape[0] != b {
        return Err(Error::Shape {
            expected: vec![b, 0],
            got: out_shape,
        });
    }
    let k = out_shape[1];
    let mut jac = vec![vec![0.0; k * d]; b];
    for col in 0..k {
        let mut seed = Tensor::zeros(&out_shape);
        for i in 0..b {
            seed.data_mut()[i * k + col] = 1.0;
        }
        let g = tape.backprop_seeded(out, seed, &[leaf])?;
        let g = g.get(leaf).expect("requested leaf");
        for (i, j) in jac.iter_mut().enumerate() {
            j[col * d..(col + 1) * d].copy_from_slice(g.row(i));
        }
    }
    Ok(jac.into_iter().map(|j| Tensor::matrix(k, d, j)).collect())
}
