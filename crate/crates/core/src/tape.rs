//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes. Every node stores the value
//! it produced, so the forward pass happens while the graph is being built.
//! Leaves are tagged as parameters, inputs or constants; constants never
//! receive gradients and the subgraphs that depend only on constants are
//! skipped during the reverse sweep.
//!
//! All reductions run left to right over the flat index so that recording,
//! replay and gradients are bit-reproducible.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
    Constant,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf(LeafKind),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[b x n] + [n]`, broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `[b x n] - [b]`, broadcast over columns.
    SubCol(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    /// Row-wise log-sum-exp, `[b x n] -> [b]`.
    LogSumExpRows(NodeId),
    /// Row-wise log-softmax, `[b x n] -> [b x n]`.
    LogSoftmaxRows(NodeId),
    /// Row-wise sum, `[b x n] -> [b]`.
    SumRows(NodeId),
    /// Full reduction to a rank-0 scalar.
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by leaf, one entry per requested leaf.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.entries.get(&leaf)
    }

    pub fn remove(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.entries.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err<T>(expected: &[usize], got: &[usize]) -> Result<T> {
    Err(Error::Shape {
        expected: expected.to_vec(),
        got: got.to_vec(),
    })
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(a.shape(), b.shape());
    }
    Ok(())
}

fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return shape_err(&[0, 0], t.shape());
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + libm::log1p(libm::exp(-v.abs()))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a)?;
    let (k2, n) = as_matrix(b)?;
    if k != k2 {
        return shape_err(&[k, n], b.shape());
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = as_matrix(a)?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::matrix(n, m, out))
}

/// Max of the row and `log(sum exp(v - max))`, the latter via `log1p` over
/// the non-maximal terms so confident rows keep full precision.
fn row_max_and_log_norm(row: &[f64]) -> (f64, f64) {
    let (arg, m) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
    let rest = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .fold(0.0, |acc, (_, &v)| acc + libm::exp(v - m));
    (m, libm::log1p(rest))
}

fn row_lse(row: &[f64]) -> f64 {
    let (m, l) = row_max_and_log_norm(row);
    m + l
}

fn eval<'a>(op: &Op, val: &dyn Fn(NodeId) -> &'a Tensor) -> Result<Tensor> {
    Ok(match *op {
        Op::Leaf(_) => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => val(a).add(val(b))?,
        Op::Sub(a, b) => val(a).sub(val(b))?,
        Op::Mul(a, b) => val(a).zip_map(val(b), |x, y| x * y)?,
        Op::Maximum(a, b) => val(a).zip_map(val(b), |x, y| if y > x { y } else { x })?,
        Op::Scale(a, c) => val(a).scale(c),
        Op::AddRow(a, b) => {
            let (m, n) = as_matrix(val(a))?;
            let bias = val(b);
            if bias.shape() != [n] {
                return shape_err(&[n], bias.shape());
            }
            let mut out = val(a).clone();
            for i in 0..m {
                for (o, &bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
            out
        }
        Op::SubCol(a, b) => {
            let (m, n) = as_matrix(val(a))?;
            let col = val(b);
            if col.shape() != [m] {
                return shape_err(&[m], col.shape());
            }
            let mut out = val(a).clone();
            for i in 0..m {
                let c = col.data()[i];
                for o in &mut out.data_mut()[i * n..(i + 1) * n] {
                    *o -= c;
                }
            }
            out
        }
        Op::MatMul(a, b) => matmul(val(a), val(b))?,
        Op::Transpose(a) => transpose(val(a))?,
        Op::Reshape(_) => unreachable!("reshape is evaluated by the caller"),
        Op::Relu(a) => val(a).map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Softplus(a) => val(a).map(softplus),
        Op::Exp(a) => val(a).map(libm::exp),
        Op::Abs(a) => val(a).map(f64::abs),
        Op::Sqrt(a) => val(a).map(libm::sqrt),
        Op::LogSumExpRows(a) => {
            let t = val(a);
            let (m, _) = as_matrix(t)?;
            Tensor::vector((0..m).map(|i| row_lse(t.row(i))).collect())
        }
        Op::LogSoftmaxRows(a) => {
            let t = val(a);
            let (m, n) = as_matrix(t)?;
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let (mx, l) = row_max_and_log_norm(t.row(i));
                out.extend(t.row(i).iter().map(|&v| (v - mx) - l));
            }
            Tensor::matrix(m, n, out)
        }
        Op::SumRows(a) => {
            let t = val(a);
            let (m, _) = as_matrix(t)?;
            Tensor::vector(
                (0..m)
                    .map(|i| t.row(i).iter().fold(0.0, |acc, &v| acc + v))
                    .collect(),
            )
        }
        Op::Sum(a) => Tensor::scalar(val(a).sum()),
    })
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, kind: LeafKind) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            value,
            needs_grad: kind != LeafKind::Constant,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Param)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Constant)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes.get(id.0)?.op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    fn inputs(op: &Op) -> (Option<NodeId>, Option<NodeId>) {
        match *op {
            Op::Leaf(_) => (None, None),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Maximum(a, b)
            | Op::AddRow(a, b)
            | Op::SubCol(a, b)
            | Op::MatMul(a, b) => (Some(a), Some(b)),
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::LogSumExpRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SumRows(a)
            | Op::Sum(a) => (Some(a), None),
        }
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.node(a)?.value.clone().reshape(shape.to_vec())?;
        let needs_grad = self.nodes[a.0].needs_grad;
        self.nodes.push(Node {
            op: Op::Reshape(a),
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let (a, b) = Tape::inputs(&op);
        for id in [a, b].into_iter().flatten() {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownLeaf(id.0));
            }
        }
        let nodes = &self.nodes;
        let value = eval(&op, &|id| &nodes[id.0].value)?;
        let needs_grad = [a, b]
            .into_iter()
            .flatten()
            .any(|id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Maximum(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(m, row))
    }

    pub fn sub_col(&mut self, m: NodeId, col: NodeId) -> Result<NodeId> {
        self.push(Op::SubCol(m, col))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    /// ReLU with derivative 0 at exactly 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softplus(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    /// Absolute value with derivative 0 at exactly 0.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }

    /// Square root with derivative 0 at exactly 0.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt(a))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSumExpRows(a))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmaxRows(a))
    }

    /// Mean over all elements.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a scalar node.
    pub fn backprop_scalar(&self, output: NodeId, wrt: &[NodeId]) -> Result<GradientMap> {
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return contract(format!(
                "backprop_scalar needs a scalar output, node {} has shape {:?}",
                output.0,
                out.value.shape()
            ));
        }
        let seed = Tensor::filled(out.value.shape(), 1.0);
        self.backprop_seeded(output, seed, wrt)
    }

    /// Reverse sweep with an explicit output cotangent (vector-Jacobian product).
    pub fn backprop_seeded(&self, output: NodeId, seed: Tensor, wrt: &[NodeId]) -> Result<GradientMap> {
        let out = self.node(output)?;
        same_shape(&out.value, &seed)?;
        for &leaf in wrt {
            match self.nodes.get(leaf.0) {
                Some(Node { op: Op::Leaf(_), .. }) => {}
                _ => return Err(Error::UnknownLeaf(leaf.0)),
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward(&node.op, &node.value, &g, &mut grads)?;
        }
        let mut entries = BTreeMap::new();
        for &leaf in wrt {
            let g = grads[..]
                .get(leaf.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.nodes[leaf.0].value.shape()));
            entries.insert(leaf, g);
        }
        Ok(GradientMap { entries })
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownLeaf(id.0))
    }

    fn backward(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match *op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.zip_map(val(b), |x, y| x * y)?);
                }
                if wants(b) {
                    accumulate(grads, b, g.zip_map(val(a), |x, y| x * y)?);
                }
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (val(a), val(b));
                if wants(a) {
                    let ga = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(&gv, (&x, &y))| if y > x { 0.0 } else { gv })
                            .collect(),
                    );
                    accumulate(grads, a, ga);
                }
                if wants(b) {
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(&gv, (&x, &y))| if y > x { gv } else { 0.0 })
                            .collect(),
                    );
                    accumulate(grads, b, gb);
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    accumulate(grads, a, g.scale(c));
                }
            }
            Op::AddRow(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    let (m, n) = as_matrix(g)?;
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for (acc, &v) in gb.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, b, Tensor::vector(gb));
                }
            }
            Op::SubCol(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    let (m, _) = as_matrix(g)?;
                    let gb = (0..m)
                        .map(|i| -g.row(i).iter().fold(0.0, |acc, &v| acc + v))
                        .collect();
                    accumulate(grads, b, Tensor::vector(gb));
                }
            }
            Op::MatMul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, matmul(g, &transpose(val(b))?)?);
                }
                if wants(b) {
                    accumulate(grads, b, matmul(&transpose(val(a))?, g)?);
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    accumulate(grads, a, transpose(g)?);
                }
            }
            Op::Reshape(a) => {
                if wants(a) {
                    accumulate(grads, a, g.clone().reshape(val(a).shape().to_vec())?);
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    accumulate(grads, a, g.zip_map(val(a), |gv, x| if x > 0.0 { gv } else { 0.0 })?);
                }
            }
            Op::Softplus(a) => {
                if wants(a) {
                    accumulate(grads, a, g.zip_map(val(a), |gv, x| gv * sigmoid(x))?);
                }
            }
            Op::Exp(a) => {
                if wants(a) {
                    accumulate(grads, a, g.zip_map(out, |gv, y| gv * y)?);
                }
            }
            Op::Abs(a) => {
                if wants(a) {
                    accumulate(
                        grads,
                        a,
                        g.zip_map(val(a), |gv, x| {
                            if x > 0.0 {
                                gv
                            } else if x < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })?,
                    );
                }
            }
            Op::Sqrt(a) => {
                if wants(a) {
                    accumulate(
                        grads,
                        a,
                        g.zip_map(out, |gv, y| if y > 0.0 { gv * 0.5 / y } else { 0.0 })?,
                    );
                }
            }
            Op::LogSumExpRows(a) => {
                if wants(a) {
                    let x = val(a);
                    let (m, n) = as_matrix(x)?;
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let (gi, li) = (g.data()[i], out.data()[i]);
                        for (o, &v) in ga[i * n..(i + 1) * n].iter_mut().zip(x.row(i)) {
                            *o = gi * libm::exp(v - li);
                        }
                    }
                    accumulate(grads, a, Tensor::matrix(m, n, ga));
                }
            }
            Op::LogSoftmaxRows(a) => {
                if wants(a) {
                    let (m, n) = as_matrix(out)?;
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let gs = g.row(i).iter().fold(0.0, |acc, &v| acc + v);
                        for ((o, &gv), &y) in ga[i * n..(i + 1) * n].iter_mut().zip(g.row(i)).zip(out.row(i)) {
                            *o = gv - libm::exp(y) * gs;
                        }
                    }
                    accumulate(grads, a, Tensor::matrix(m, n, ga));
                }
            }
            Op::SumRows(a) => {
                if wants(a) {
                    let (m, n) = as_matrix(val(a))?;
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        ga[i * n..(i + 1) * n].fill(g.data()[i]);
                    }
                    accumulate(grads, a, Tensor::matrix(m, n, ga));
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    accumulate(grads, a, Tensor::filled(val(a).shape(), g.item()));
                }
            }
        }
        Ok(())
    }

    /// Recomputes every node from the recorded leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        self.replay_with(&[])
    }

    /// Recomputes every node after substituting new values for some leaves.
    pub fn replay_with(&self, overrides: &[(NodeId, Tensor)]) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Leaf(_) => match overrides.iter().find(|(id, _)| id.0 == i) {
                    Some((_, t)) => {
                        same_shape(&node.value, t)?;
                        t.clone()
                    }
                    None => node.value.clone(),
                },
                Op::Reshape(a) => values[a.0].clone().reshape(node.value.shape().to_vec())?,
                ref op => eval(op, &|id| &values[id.0])?,
            };
            values.push(v);
        }
        for (id, _) in overrides {
            if !matches!(self.nodes.get(id.0).map(|n| n.op), Some(Op::Leaf(_))) {
                return Err(Error::UnknownLeaf(id.0));
            }
        }
        Ok(values)
    }
}
