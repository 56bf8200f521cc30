//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Building an op only records
//! it; [`Graph::forward`] evaluates the ancestors of a root in creation
//! order and caches every value, and [`Graph::backward`] walks the same
//! nodes in reverse creation order. Parents always precede children, so
//! creation order is a topological order and gradient accumulation is
//! reproducible bit for bit.
//!
//! Leaves are either trainable (they receive gradients) or frozen (data,
//! teacher outputs, fixed classifier heads). Frozen leaves report an all-zero
//! gradient and nothing upstream of them is differentiated.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf { trainable: bool },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    RowNorm(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::RowNorm(_) => "row_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
        }
    }

    fn parents(&self) -> [Option<NodeId>; 2] {
        match *self {
            Op::Leaf { .. } => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                [Some(a), Some(b)]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::RowNorm(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    grad: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(Node {
            op,
            value: None,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf { trainable },
            value: Some(value),
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }
    /// Broadcasting add; also serves as the bias add.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }
    /// Sum of all entries, shape `[]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    /// Mean of all entries, shape `[]`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    /// Sum over the last axis, keeping it with width 1.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumRows(a))
    }
    /// Euclidean norm over the last axis, keeping it with width 1. The
    /// gradient at a zero row is taken to be zero.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowNorm(a))
    }
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    pub fn is_trainable_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    /// Trainable leaves in creation order.
    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .map(NodeId)
            .filter(|&id| self.is_trainable_leaf(id))
            .collect()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or(Error::NotEvaluated(id.0))
    }

    /// Replace a leaf's value. Every cached op value and gradient is dropped.
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &self.nodes[id.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::arg("id", format!("node {} is not a leaf", id.0)));
        }
        let old = node.value.as_ref().expect("leaves always hold a value");
        if old.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.nodes[id.0].value = Some(value);
        for node in &mut self.nodes {
            node.grad = None;
            if !matches!(node.op, Op::Leaf { .. }) {
                node.value = None;
            }
        }
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut mask = vec![false; root.0 + 1];
        mask[root.0] = true;
        for i in (0..=root.0).rev() {
            if !mask[i] {
                continue;
            }
            for p in self.nodes[i].op.parents().into_iter().flatten() {
                mask[p.0] = true;
            }
        }
        mask
    }

    /// Evaluate every ancestor of `root` (cached values are reused) and
    /// return the root value.
    pub fn forward(&mut self, root: NodeId) -> Result<Tensor> {
        let mask = self.ancestors(root);
        for (i, &needed) in mask.iter().enumerate().take(root.0 + 1) {
            if needed && self.nodes[i].value.is_none() {
                let v = self.eval(self.nodes[i].op)?;
                self.nodes[i].value = Some(v);
            }
        }
        Ok(self.value(root)?.clone())
    }

    fn eval(&self, op: Op) -> Result<Tensor> {
        let v = |id: NodeId| self.value(id);
        Ok(match op {
            Op::Leaf { .. } => unreachable!("leaves are always evaluated"),
            Op::MatMul(a, b) => v(a)?.matmul(v(b)?)?,
            Op::Transpose(a) => v(a)?.transpose()?,
            Op::Add(a, b) => v(a)?.add(v(b)?)?,
            Op::Sub(a, b) => v(a)?.sub(v(b)?)?,
            Op::Mul(a, b) => v(a)?.mul(v(b)?)?,
            Op::Div(a, b) => v(a)?.div(v(b)?)?,
            Op::Scale(a, c) => v(a)?.scale(c),
            // NaN passes through so the non-finite check downstream sees it
            Op::Relu(a) => v(a)?.map(|x| if x < 0.0 { 0.0 } else { x }),
            Op::Exp(a) => v(a)?.map(f64::exp),
            Op::Log(a) => v(a)?.map(f64::ln),
            Op::Sqrt(a) => v(a)?.map(f64::sqrt),
            Op::Sum(a) => Tensor::scalar(v(a)?.sum()),
            Op::Mean(a) => {
                let t = v(a)?;
                Tensor::scalar(t.sum() / t.len() as f64)
            }
            Op::SumRows(a) => v(a)?.reduce_rows(|r| r.iter().sum()),
            Op::RowNorm(a) => v(a)?.reduce_rows(crate::tensor::norm),
            Op::Softmax(a) => v(a)?.softmax_rows(),
            Op::LogSoftmax(a) => v(a)?.log_softmax_rows(),
        })
    }

    /// Accumulate d(root)/d(node) into every node that depends on a
    /// trainable leaf. After this call every leaf holds a gradient: the
    /// accumulated one for trainable leaves, zeros for frozen leaves.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_shape = self.value(root)?.shape().to_vec();
        if root_shape.len() > 1 || root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(root_shape));
        }
        let mask = self.ancestors(root);
        let mut needs = vec![false; root.0 + 1];
        for i in 0..=root.0 {
            if !mask[i] {
                continue;
            }
            if self.nodes[i].value.is_none() {
                return Err(Error::NotEvaluated(i));
            }
            needs[i] = match self.nodes[i].op {
                Op::Leaf { trainable } => trainable,
                op => op.parents().into_iter().flatten().any(|p| needs[p.0]),
            };
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::full(&root_shape, 1.0));

        for i in (0..=root.0).rev() {
            if !needs[i] {
                continue;
            }
            let op = self.nodes[i].op;
            if matches!(op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.as_ref() else {
                continue;
            };
            let contributions = self.local_grads(i, op, g)?;
            for (p, contrib) in contributions {
                if !needs[p.0] {
                    continue;
                }
                let slot = &mut self.nodes[p.0].grad;
                match slot {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    None => *slot = Some(contrib),
                }
            }
        }

        for node in &mut self.nodes {
            if let Op::Leaf { trainable } = node.op {
                let shape = node.value.as_ref().expect("leaf value").shape().to_vec();
                if !trainable || node.grad.is_none() {
                    node.grad = Some(Tensor::zeros(&shape));
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, op: Op, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: NodeId| self.value(id).expect("ancestor evaluated");
        let out = self.nodes[i].value.as_ref().expect("node evaluated");
        let unary = |a: NodeId, t: Tensor| Ok(vec![(a, t)]);
        match op {
            Op::Leaf { .. } => Ok(vec![]),
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let a2 = as_matrix(av, true);
                let b2 = as_matrix(bv, false);
                let g2 = g.clone().reshape(vec![a2.shape()[0], b2.shape()[1]])?;
                let da = g2.matmul(&b2.transpose()?)?.reshape(av.shape().to_vec())?;
                let db = a2.transpose()?.matmul(&g2)?.reshape(bv.shape().to_vec())?;
                Ok(vec![(a, da), (b, db)])
            }
            Op::Transpose(a) => unary(a, g.transpose()?),
            Op::Add(a, b) => Ok(vec![
                (a, g.reduce_to(v(a).shape())),
                (b, g.reduce_to(v(b).shape())),
            ]),
            Op::Sub(a, b) => Ok(vec![
                (a, g.reduce_to(v(a).shape())),
                (b, g.scale(-1.0).reduce_to(v(b).shape())),
            ]),
            Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                Ok(vec![
                    (a, g.mul(bv)?.reduce_to(av.shape())),
                    (b, g.mul(av)?.reduce_to(bv.shape())),
                ])
            }
            Op::Div(a, b) => {
                let (av, bv) = (v(a), v(b));
                let da = g.div(bv)?.reduce_to(av.shape());
                let db = g.mul(out)?.div(bv)?.scale(-1.0).reduce_to(bv.shape());
                Ok(vec![(a, da), (b, db)])
            }
            Op::Scale(a, c) => unary(a, g.scale(c)),
            Op::Relu(a) => unary(
                a,
                g.zip_broadcast(v(a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?,
            ),
            Op::Exp(a) => unary(a, g.mul(out)?),
            Op::Log(a) => unary(a, g.div(v(a))?),
            Op::Sqrt(a) => unary(a, g.zip_broadcast(out, "sqrt", |g, y| g / (2.0 * y))?),
            Op::Sum(a) => unary(a, Tensor::full(v(a).shape(), g.item())),
            Op::Mean(a) => {
                let n = v(a).len() as f64;
                unary(a, Tensor::full(v(a).shape(), g.item() / n))
            }
            Op::SumRows(a) => unary(a, Tensor::zeros(v(a).shape()).add(g)?),
            Op::RowNorm(a) => {
                let x = v(a);
                let w = x.row_len();
                let mut d = Tensor::zeros(x.shape());
                for (r, dst) in d.data_mut().chunks_mut(w).enumerate() {
                    let n = out.data()[r];
                    if n > 0.0 {
                        let s = g.data()[r] / n;
                        for (o, &xi) in dst.iter_mut().zip(x.row(r)) {
                            *o = s * xi;
                        }
                    }
                }
                unary(a, d)
            }
            Op::Softmax(a) => {
                let w = out.row_len();
                let mut d = Tensor::zeros(out.shape());
                for (r, dst) in d.data_mut().chunks_mut(w).enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in dst.iter_mut().zip(y).zip(gr) {
                        *o = yi * (gi - inner);
                    }
                }
                unary(a, d)
            }
            Op::LogSoftmax(a) => {
                let w = out.row_len();
                let mut d = Tensor::zeros(out.shape());
                for (r, dst) in d.data_mut().chunks_mut(w).enumerate() {
                    let ls = out.row(r);
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for ((o, &l), &gi) in dst.iter_mut().zip(ls).zip(gr) {
                        *o = gi - l.exp() * total;
                    }
                }
                unary(a, d)
            }
        }
    }

    /// Name of the op at `id`, for diagnostics.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

fn as_matrix(t: &Tensor, is_lhs: bool) -> Tensor {
    match t.shape() {
        [k] if is_lhs => t.clone().reshape(vec![1, *k]).expect("same length"),
        [k] => t.clone().reshape(vec![*k, 1]).expect("same length"),
        _ => t.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let y = g.mul(x, x);
        assert_eq!(g.forward(y).unwrap().data(), &[4.0]);

        g.set_value(x, t(&[1], &[3.0])).unwrap();
        let loss = g.sum(y);
        g.forward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[0.0]));
        let y = g.relu(x);
        assert_eq!(g.forward(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_finite_values_propagate() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        let w = g.constant(t(&[2, 1], &[1.0, f64::INFINITY]));
        let r = g.relu(x);
        let y = g.matmul(r, w);
        assert!(g.forward(r).unwrap().data()[0].is_nan());
        assert!(g.forward(y).unwrap().item().is_nan());
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(x, w);
        assert_eq!(g.forward(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let c = g.matmul(a, b);
        let err = g.forward(c).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::NotEvaluated(_))));
        g.forward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn softmax_cross_entropy_grad_is_p_minus_y() {
        let mut g = Graph::new();
        let logits = g.param(t(&[1, 3], &[0.3, -1.2, 2.0]));
        let onehot = g.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let ls = g.log_softmax(logits);
        let picked = g.mul(ls, onehot);
        let s = g.sum(picked);
        let loss = g.scale(s, -1.0);
        g.forward(loss).unwrap();
        g.backward(loss).unwrap();
        let p = t(&[1, 3], &[0.3, -1.2, 2.0]).softmax_rows();
        let grad = g.grad(logits).unwrap();
        for j in 0..3 {
            let y = if j == 1 { 1.0 } else { 0.0 };
            assert!((grad.data()[j] - (p.data()[j] - y)).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_leaf_gets_zero_grad_and_keeps_value() {
        let mut g = Graph::new();
        let w_val = t(&[2], &[0.5, -0.25]);
        let w = g.constant(w_val.clone());
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.mul(w, x);
        let loss = g.sum(y);
        g.forward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.value(w).unwrap(), &w_val);
        assert_eq!(g.grad(x).unwrap().data(), &[0.5, -0.25]);
    }

    #[test]
    fn fan_out_accumulates_each_edge_once() {
        // loss = sum(x + x + x) -> grad 3
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let a = g.add(x, x);
        let b = g.add(a, x);
        let loss = g.sum(b);
        g.forward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn row_norm_grad_is_zero_at_origin() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 3]));
        let n = g.row_norm(x);
        let loss = g.sum(n);
        g.forward(loss).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
