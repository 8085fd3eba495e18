use std::f64::consts::LN_2;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Reciprocal(NodeId),
    Exp2(NodeId),
    RepeatGroups {
        input: NodeId,
        group_size: usize,
    },
    StraightThrough(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Nodes are stored in creation order, which is a
/// topological order of the recorded graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoint_calls: usize,
}

fn shape2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, format!("expected a 2-D tensor, got {s:?}"))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Number of adjoint rules run by the last [`Tape::backward`].
    pub fn adjoint_calls(&self) -> usize {
        self.adjoint_calls
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.same_shape(vb) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", va.shape(), vb.shape())))
        }
    }

    fn elementwise(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, op)
    }

    fn zip(&mut self, op_name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    /// `(m, k) · (k, n) → (m, n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = shape2(self.value(a), "matmul")?;
        let (k2, n) = shape2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({m}, {k}) · ({k2}, {n})")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = va[i * k + p];
                for j in 0..n {
                    out[i * n + j] += x * vb[p * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.elementwise(a, |x| x * factor, Op::Scale(a, factor))
    }

    /// `(m, n) + (n,)`, the bias broadcast over rows. This is the only
    /// broadcasting op.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = shape2(self.value(x), "add_bias")?;
        if self.value(bias).shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("input ({m}, {n}) with bias {:?}", self.value(bias).shape()),
            ));
        }
        let vb = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + vb[i % n])
            .collect();
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.elementwise(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.elementwise(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn reciprocal(&mut self, a: NodeId) -> NodeId {
        self.elementwise(a, |x| 1.0 / x, Op::Reciprocal(a))
    }

    /// `2^x` elementwise.
    pub fn exp2(&mut self, a: NodeId) -> NodeId {
        self.elementwise(a, f64::exp2, Op::Exp2(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), rg, Op::Mean(a))
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let m = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.len() as f64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(m), rg, Op::Mse(a, b)))
    }

    /// Mean over rows of `-log softmax(logits)[label]`. `logits` is `(m, c)`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, c) = shape2(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != m {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{m} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let v = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &v[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let rg = self.any_grad(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / m as f64), rg, op))
    }

    /// Expands a per-group vector `(G,)` to `shape`: flat element `i`
    /// takes the value of group `i / group_size`. The last group may be
    /// shorter than `group_size`.
    pub fn repeat_groups(&mut self, input: NodeId, group_size: usize, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(input);
        let numel: usize = shape.iter().product();
        if group_size == 0 || v.shape().len() != 1 || numel == 0 || numel.div_ceil(group_size) != v.len() {
            return Err(Error::shape(
                "repeat_groups",
                format!("{:?} groups of size {group_size} into {shape:?}", v.shape()),
            ));
        }
        let data = (0..numel).map(|i| v.data()[i / group_size]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::RepeatGroups { input, group_size }))
    }

    /// Forward value `value`, backward identity into `input`.
    pub fn straight_through(&mut self, input: NodeId, value: Tensor) -> Result<NodeId> {
        if !value.same_shape(self.value(input)) {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", self.value(input).shape(), value.shape()),
            ));
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::StraightThrough(input)))
    }

    /// Accumulates `d loss / d node` into every node that requires a
    /// gradient. Previous gradients are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.adjoint_calls = 0;
        self.nodes[loss.0].grad.fill(1.0);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let contributions = self.adjoint(i);
            self.adjoint_calls += 1;
            for (id, g) in contributions {
                if self.nodes[id.0].requires_grad {
                    self.nodes[id.0].grad.add_assign(&g);
                }
            }
        }
        Ok(())
    }

    fn adjoint(&self, i: usize) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[i];
        let up = &node.grad;
        let out = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let zip_with = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = up.data().iter().zip(t.data()).map(|(&u, &x)| f(u, x)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("adjoint shape")
        };

        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let (ad, bd, ud) = (va.data(), vb.data(), up.data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for r in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += ud[r * n + j] * bd[p * n + j];
                            gb[p * n + j] += ad[r * k + p] * ud[r * n + j];
                        }
                        ga[r * k + p] = acc;
                    }
                }
                vec![
                    (*a, Tensor::new(vec![m, k], ga).expect("adjoint shape")),
                    (*b, Tensor::new(vec![k, n], gb).expect("adjoint shape")),
                ]
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.map(|u| -u))],
            Op::Mul(a, b) => vec![
                (*a, zip_with(val(*b), &|u, y| u * y)),
                (*b, zip_with(val(*a), &|u, x| u * x)),
            ],
            Op::Scale(a, f) => vec![(*a, up.map(|u| u * f))],
            Op::AddBias(x, bias) => {
                let n = val(*bias).len();
                let mut gb = vec![0.0; n];
                for (idx, u) in up.data().iter().enumerate() {
                    gb[idx % n] += u;
                }
                vec![(*x, up.clone()), (*bias, Tensor::from_vec(gb))]
            }
            // derivative at exactly zero is taken as zero
            Op::Relu(a) => vec![(*a, zip_with(val(*a), &|u, x| if x > 0.0 { u } else { 0.0 }))],
            Op::Sigmoid(a) => vec![(*a, zip_with(out, &|u, s| u * s * (1.0 - s)))],
            Op::Reciprocal(a) => vec![(*a, zip_with(out, &|u, r| -u * r * r))],
            Op::Exp2(a) => vec![(*a, zip_with(out, &|u, p| u * LN_2 * p))],
            Op::Sum(a) => {
                let u = up.item();
                vec![(*a, val(*a).map(|_| u))]
            }
            Op::Mean(a) => {
                let u = up.item() / val(*a).len() as f64;
                vec![(*a, val(*a).map(|_| u))]
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = 2.0 * up.item() / va.len() as f64;
                let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| c * (x - y)).collect();
                let ga = Tensor::new(va.shape().to_vec(), data).expect("adjoint shape");
                let gb = ga.map(|g| -g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let v = val(*logits);
                let (m, c) = (v.shape()[0], v.shape()[1]);
                let u = up.item() / m as f64;
                let mut g = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * c + l] -= 1.0;
                }
                g.iter_mut().for_each(|x| *x *= u);
                vec![(*logits, Tensor::new(vec![m, c], g).expect("adjoint shape"))]
            }
            Op::RepeatGroups { input, group_size } => {
                let mut g = vec![0.0; val(*input).len()];
                for (idx, u) in up.data().iter().enumerate() {
                    g[idx / group_size] += u;
                }
                vec![(*input, Tensor::from_vec(g))]
            }
            Op::StraightThrough(a) => vec![(*a, up.clone())],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_rule() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 4]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 4]);
        let err = t.matmul(b, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("(3, 4) · (3, 4)"), "{err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).item(), 0.5);
    }

    #[test]
    fn exp2_value_and_adjoint() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::scalar(4.0));
        let y = t.exp2(x);
        t.backward(y).unwrap();
        assert_eq!(t.value(y).item(), 16.0);
        // ln 2 · 16
        assert!((t.grad(x).item() - 11.090354888959125).abs() < 1e-12);
        let h = 1e-6;
        let fd = ((4.0f64 + h).exp2() - (4.0f64 - h).exp2()) / (2.0 * h);
        assert!((t.grad(x).item() - fd).abs() < 1e-6);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.variable(Tensor::from_vec(vec![0.3, -2.0, 5.0]));
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.variable(Tensor::from_vec(vec![0.3, -2.0]));
        let target = t.constant(Tensor::from_vec(vec![0.3, -2.0]));
        let l = t.mse(w, target).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(t.backward(w).is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::zeros(&[3]));
        assert!(t.add(a, b).unwrap_err().to_string().starts_with("add:"));
        assert!(t.mul(a, b).unwrap_err().to_string().starts_with("mul:"));
        assert!(t.mse(a, b).unwrap_err().to_string().starts_with("mse:"));
        let x = t.constant(Tensor::zeros(&[4, 2]));
        assert!(t.add_bias(x, b).unwrap_err().to_string().starts_with("add_bias:"));
        assert!(t.softmax_cross_entropy(x, &[0, 1]).is_err());
        assert!(t.softmax_cross_entropy(x, &[0, 1, 2, 0]).is_err());
        assert!(t.repeat_groups(b, 2, &[7]).is_err());
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn chain_runs_each_adjoint_once() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::scalar(0.3));
        let mut y = x;
        for _ in 0..50 {
            y = t.sigmoid(y);
        }
        t.backward(y).unwrap();
        assert_eq!(t.adjoint_calls(), 50);
        // a second backward starts from cleared gradients
        let g = t.grad(x).item();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).item(), g);
        assert_eq!(t.adjoint_calls(), 50);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let x = t.variable(Tensor::scalar(3.0));
        let p = t.mul(c, x).unwrap();
        t.backward(p).unwrap();
        assert_eq!(t.grad(x).item(), 2.0);
        assert_eq!(t.grad(c).item(), 0.0);
    }

    #[test]
    fn repeat_groups_partial_tail() {
        let mut t = Tape::new();
        let g = t.variable(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let r = t.repeat_groups(g, 3, &[2, 4]).unwrap();
        assert_eq!(t.value(r).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0]);
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(g).data(), &[3.0, 3.0, 2.0]);
    }
}
