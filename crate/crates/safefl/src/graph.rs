//! Append-only computation graph with reverse-mode differentiation.
//!
//! Nodes are recorded in topological order by construction (parents always
//! precede children) and every node caches its forward value eagerly, so a
//! single reverse sweep over the node list yields exact gradients for all
//! differentiable leaves. The primitive set is deliberately small: just
//! enough to express softmax/tanh classifier losses and their closed-form
//! parameter gradients, which is what the unrolled inner-SGD chain needs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise (Hadamard) product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    /// Mean over rows of the cross-entropy between row-softmaxed logits
    /// (first parent) and soft target rows (second parent).
    SoftCrossEntropy(NodeId, NodeId),
    SquaredL2Norm(NodeId),
    Mean(NodeId),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::SoftCrossEntropy(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::SoftmaxRows(a)
            | Op::SquaredL2Norm(a)
            | Op::Mean(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients indexed by node id, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward output with respect to node `id`. `None` for
    /// nodes that do not require gradients.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts an input tensor. Only leaves marked `requires_grad` receive
    /// gradients in the backward pass.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!(
                "{}: {:?} vs {:?}",
                what, sa, sb
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::from_raw(self.value(a).shape().to_vec(), data);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::from_raw(self.value(a).shape().to_vec(), data);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::from_raw(self.value(a).shape().to_vec(), data);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor"));
        }
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_raw(self.value(a).shape().to_vec(), data);
        Ok(self.push(Op::Scale(a, factor), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        if ca != rb {
            return Err(Error::ShapeMismatch(format!(
                "matmul: [{}x{}] * [{}x{}]",
                ra, ca, rb, cb
            )));
        }
        let value = matmul_raw(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::from_raw(vec![cols, rows], data);
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::from_raw(self.value(a).shape().to_vec(), data);
        Ok(self.push(Op::Tanh(a), value))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2();
        if cols == 0 {
            return Err(Error::ShapeMismatch("softmax_rows: zero columns".into()));
        }
        let value = softmax_raw(self.value(a).data(), rows, cols);
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    /// Mean over rows of `-sum_j targets[r][j] * log softmax(logits[r])[j]`.
    /// Targets are soft rows; they are not required to sum to one.
    pub fn soft_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.same_shape(logits, targets, "soft_cross_entropy")?;
        let (rows, cols) = self.value(logits).dims2();
        let lg = self.value(logits).data();
        let tg = self.value(targets).data();
        let mut total = 0.0;
        for r in 0..rows {
            let row = &lg[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for c in 0..cols {
                total -= tg[r * cols + c] * (row[c] - lse);
            }
        }
        let value = Tensor::from_raw(vec![1], vec![total / rows as f64]);
        Ok(self.push(Op::SoftCrossEntropy(logits, targets), value))
    }

    /// Sum of squared entries, as a scalar node.
    pub fn squared_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        let value = Tensor::from_raw(vec![1], vec![total]);
        Ok(self.push(Op::SquaredL2Norm(a), value))
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::ShapeMismatch("mean of empty tensor".into()));
        }
        let value = Tensor::from_raw(vec![1], vec![t.data().iter().sum::<f64>() / t.len() as f64]);
        Ok(self.push(Op::Mean(a), value))
    }

    /// Reverse-mode sweep from the scalar node `output`. Returns gradients
    /// for every node with `requires_grad`; leaves not connected to the
    /// output get exact zeros.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(Tensor::zeros(n.value.shape().to_vec()))
                } else {
                    None
                }
            })
            .collect();
        if grads[output.0].is_none() {
            // Output depends on no differentiable leaf; all gradients stay zero.
            return Ok(Gradients { grads });
        }
        grads[output.0].as_mut().unwrap().data_mut()[0] = 1.0;

        for idx in (0..=output.0).rev() {
            let Some(grad_out) = grads[idx].clone() else {
                continue;
            };
            self.accumulate_parents(idx, &grad_out, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, idx: usize, grad_out: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, a, grad_out.data());
                add_into(grads, b, grad_out.data());
            }
            Op::Sub(a, b) => {
                add_into(grads, a, grad_out.data());
                sub_into(grads, b, grad_out.data());
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = zip_map(grad_out, self.value(b), |g, y| g * y);
                let gb: Vec<f64> = zip_map(grad_out, self.value(a), |g, x| g * x);
                add_into(grads, a, &ga);
                add_into(grads, b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = grad_out.data().iter().map(|g| g * c).collect();
                add_into(grads, a, &ga);
            }
            Op::MatMul(a, b) => {
                // dA = G * B^T, dB = A^T * G
                if grads[a.0].is_some() {
                    let bt = transpose_raw(self.value(b));
                    let ga = matmul_raw(grad_out, &bt);
                    add_into(grads, a, ga.data());
                }
                if grads[b.0].is_some() {
                    let at = transpose_raw(self.value(a));
                    let gb = matmul_raw(&at, grad_out);
                    add_into(grads, b, gb.data());
                }
            }
            Op::Transpose(a) => {
                let gt = transpose_raw(grad_out);
                add_into(grads, a, gt.data());
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = zip_map(grad_out, &node.value, |g, y| g * (1.0 - y * y));
                add_into(grads, a, &ga);
            }
            Op::SoftmaxRows(a) => {
                // dL/dx_rj = y_rj * (g_rj - sum_k g_rk y_rk)
                let (rows, cols) = node.value.dims2();
                let y = node.value.data();
                let g = grad_out.data();
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let dot: f64 = (0..cols).map(|c| g[base + c] * y[base + c]).sum();
                    for c in 0..cols {
                        ga[base + c] = y[base + c] * (g[base + c] - dot);
                    }
                }
                add_into(grads, a, &ga);
            }
            Op::SoftCrossEntropy(logits, targets) => {
                let g = grad_out.data()[0];
                let (rows, cols) = self.value(logits).dims2();
                let lg = self.value(logits).data();
                let tg = self.value(targets).data();
                let inv_rows = 1.0 / rows as f64;
                if grads[logits.0].is_some() || grads[targets.0].is_some() {
                    let mut glogits = vec![0.0; lg.len()];
                    let mut gtargets = vec![0.0; tg.len()];
                    for r in 0..rows {
                        let base = r * cols;
                        let row = &lg[base..base + cols];
                        let lse = log_sum_exp(row);
                        let tsum: f64 = tg[base..base + cols].iter().sum();
                        for c in 0..cols {
                            let p = (row[c] - lse).exp();
                            // d/dlogit = (tsum * softmax - target) / rows
                            glogits[base + c] = g * inv_rows * (tsum * p - tg[base + c]);
                            // d/dtarget = -log softmax / rows
                            gtargets[base + c] = -g * inv_rows * (row[c] - lse);
                        }
                    }
                    add_into(grads, logits, &glogits);
                    add_into(grads, targets, &gtargets);
                }
            }
            Op::SquaredL2Norm(a) => {
                let g = grad_out.data()[0];
                let ga: Vec<f64> = self.value(a).data().iter().map(|x| 2.0 * x * g).collect();
                add_into(grads, a, &ga);
            }
            Op::Mean(a) => {
                let g = grad_out.data()[0] / self.value(a).len() as f64;
                let ga = vec![g; self.value(a).len()];
                add_into(grads, a, &ga);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn add_into(grads: &mut [Option<Tensor>], target: NodeId, contribution: &[f64]) {
    if let Some(g) = grads[target.index()].as_mut() {
        for (slot, c) in g.data_mut().iter_mut().zip(contribution) {
            *slot += c;
        }
    }
}

fn sub_into(grads: &mut [Option<Tensor>], target: NodeId, contribution: &[f64]) {
    if let Some(g) = grads[target.index()].as_mut() {
        for (slot, c) in g.data_mut().iter_mut().zip(contribution) {
            *slot -= c;
        }
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (ra, ca) = a.dims2();
    let (_, cb) = b.dims2();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; ra * cb];
    for i in 0..ra {
        for k in 0..ca {
            let aik = ad[i * ca + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[k * cb..(k + 1) * cb];
            let orow = &mut out[i * cb..(i + 1) * cb];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::from_raw(vec![ra, cb], out)
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (rows, cols) = a.dims2();
    let src = a.data();
    let mut data = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            data[c * rows + r] = src[r * cols + c];
        }
    }
    Tensor::from_raw(vec![cols, rows], data)
}

fn softmax_raw(data: &[f64], rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    Tensor::from_raw(vec![rows, cols], out)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, rows: usize, cols: usize, data: &[f64], grad: bool) -> NodeId {
        g.leaf(Tensor::matrix(rows, cols, data.to_vec()).unwrap(), grad)
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let b = mat(&mut g, 2, 1, &[1.0, 1.0], false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let a = mat(&mut g, 1, 2, &[0.0, 0.0], false);
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn squared_l2_norm_of_difference() {
        let mut g = Graph::new();
        let a = mat(&mut g, 1, 2, &[3.0, 4.0], false);
        let b = mat(&mut g, 1, 2, &[0.0, 0.0], false);
        let d = g.sub(a, b).unwrap();
        let n = g.squared_l2_norm(d).unwrap();
        assert_eq!(g.value(n).scalar_value(), 25.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = mat(&mut g, 1, 2, &[1.0, 2.0], false);
        let b = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(b, b).is_ok());
        let c = mat(&mut g, 3, 1, &[1.0, 2.0, 3.0], false);
        assert!(g.matmul(a, c).is_err());
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::new();
        let a = mat(&mut g, 1, 2, &[1.0, 2.0], true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn gradient_of_squared_norm_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![3.0]).unwrap(), true);
        let n = g.squared_l2_norm(x).unwrap();
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let mut g = Graph::new();
        let logits = mat(&mut g, 1, 2, &[0.0, 0.0], true);
        let target = mat(&mut g, 1, 2, &[1.0, 0.0], false);
        let loss = g.soft_cross_entropy(logits, target).unwrap();
        let grads = g.backward(loss).unwrap();
        let got = grads.wrt(logits).unwrap().data();
        assert!((got[0] - -0.5).abs() < 1e-12);
        assert!((got[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0], true);
        let unused = mat(&mut g, 1, 2, &[5.0, 5.0], true);
        let n = g.squared_l2_norm(x).unwrap();
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.leaf(
                Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 2.5]).unwrap(),
                true,
            );
            let t = g.tanh(a).unwrap();
            let s = g.softmax_rows(t).unwrap();
            let m = g.mean(s).unwrap();
            (g.value(m).scalar_value(), {
                let grads = g.backward(m).unwrap();
                grads.wrt(a).unwrap().data().to_vec()
            })
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }
}
