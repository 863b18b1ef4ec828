//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and
//! records its parents; node ids are therefore a topological order and the
//! tape is acyclic by construction.
//!
//! Backward passes are themselves recorded on the tape: each local derivative
//! rule is written in terms of the same primitive operations, so a gradient
//! returned by [`Graph::gradients`] is an ordinary [`Var`] that can be
//! differentiated again (reverse-over-reverse). Jacobian penalties such as
//! `‖εᵀJ‖²` rely on this.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sum(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Transpose(NodeId),
    SumRows(NodeId),
    BroadcastRows(NodeId),
    Expand(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Gradients keyed by the id of the leaf they belong to.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradMap {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every node recorded after the first `len`. Callers must not hold
    /// a [`Var`] created after that point.
    pub(crate) fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Constant, false)
    }

    fn insert(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn var(&self, id: NodeId) -> Var<'_> {
        Var { graph: self, id }
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op_parents(&op).iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.insert(value, op, requires_grad))
    }

    fn check(&self, var: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, var.graph) {
            Ok(())
        } else {
            Err(Error::ForeignNode(var.id))
        }
    }

    /// Runs the recorded backward pass from `root` and returns, for every node
    /// up to `root`, the id of its accumulated gradient node.
    fn accumulate<'g>(&'g self, root: Var<'g>, seed: Var<'g>) -> Result<Vec<Option<NodeId>>> {
        self.check(&root)?;
        self.check(&seed)?;
        let root_shape = root.shape();
        if seed.shape() != root_shape {
            return Err(Error::SeedShape {
                seed: seed.shape(),
                root: root_shape,
            });
        }
        let mut grads: Vec<Option<NodeId>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed.id);

        for id in (0..=root.id).rev() {
            let Some(gid) = grads[id] else { continue };
            if !self.requires_grad(id) {
                continue;
            }
            let op = self.nodes.borrow()[id].op.clone();
            let g = self.var(gid);
            let this = self.var(id);
            let mut push = |parent: NodeId, contrib: Var<'g>| -> Result<()> {
                if !self.requires_grad(parent) {
                    return Ok(());
                }
                grads[parent] = Some(match grads[parent] {
                    None => contrib.id,
                    Some(prev) => self.var(prev).add(&contrib)?.id,
                });
                Ok(())
            };
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    push(a, g)?;
                    push(b, g)?;
                }
                Op::Sub(a, b) => {
                    push(a, g)?;
                    if self.requires_grad(b) {
                        push(b, g.neg()?)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(a) {
                        push(a, g.mul(&self.var(b))?)?;
                    }
                    if self.requires_grad(b) {
                        push(b, g.mul(&self.var(a))?)?;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(a) {
                        push(a, g.matmul(&self.var(b).transpose()?)?)?;
                    }
                    if self.requires_grad(b) {
                        push(b, self.var(a).transpose()?.matmul(&g)?)?;
                    }
                }
                Op::Relu(a) => {
                    let mask = self.constant(self.value_of(a).step());
                    push(a, g.mul(&mask)?)?;
                }
                Op::Tanh(a) => {
                    let ones = self.constant(Tensor::full(&this.shape(), 1.0));
                    let slope = ones.sub(&this.square()?)?;
                    push(a, g.mul(&slope)?)?;
                }
                Op::Sin(a) => {
                    let slope = self.var(a).cos()?;
                    push(a, g.mul(&slope)?)?;
                }
                Op::Cos(a) => {
                    let slope = self.var(a).sin()?.neg()?;
                    push(a, g.mul(&slope)?)?;
                }
                Op::Sum(a) => {
                    let shape = self.var(a).shape();
                    push(a, g.expand(&shape)?)?;
                }
                Op::Square(a) => {
                    push(a, g.mul(&self.var(a))?.scale(2.0)?)?;
                }
                Op::Scale(a, c) => push(a, g.scale(c)?)?,
                Op::AddBias(a, b) => {
                    push(a, g)?;
                    if self.requires_grad(b) {
                        push(b, g.sum_rows()?)?;
                    }
                }
                Op::Transpose(a) => push(a, g.transpose()?)?,
                Op::SumRows(a) => {
                    let rows = self.var(a).shape()[0];
                    push(a, g.broadcast_rows(rows)?)?;
                }
                Op::BroadcastRows(a) => push(a, g.sum_rows()?)?,
                Op::Expand(a) => push(a, g.sum()?)?,
            }
        }
        Ok(grads)
    }

    /// Differentiable gradients of `root` with respect to `wrt`.
    ///
    /// `seed` defaults to ones of the root shape. Inputs that `root` does not
    /// depend on get a zero constant of their own shape.
    pub fn gradients<'g>(
        &'g self,
        root: Var<'g>,
        seed: Option<Var<'g>>,
        wrt: &[Var<'g>],
    ) -> Result<Vec<Var<'g>>> {
        let seed = match seed {
            Some(s) => s,
            None => self.constant(Tensor::full(&root.shape(), 1.0)),
        };
        let grads = self.accumulate(root, seed)?;
        wrt.iter()
            .map(|w| {
                self.check(w)?;
                Ok(match grads.get(w.id).copied().flatten() {
                    Some(id) => self.var(id),
                    None => self.constant(Tensor::zeros(&w.shape())),
                })
            })
            .collect()
    }

    /// Numeric gradients of `root` for every differentiable leaf it depends on.
    pub fn backward<'g>(&'g self, root: Var<'g>, seed: Option<&Tensor>) -> Result<GradMap> {
        let seed = match seed {
            Some(s) => self.constant(s.clone()),
            None => self.constant(Tensor::full(&root.shape(), 1.0)),
        };
        let grads = self.accumulate(root, seed)?;
        let nodes = self.nodes.borrow();
        let grads = grads
            .iter()
            .enumerate()
            .filter_map(|(id, g)| {
                let g = (*g)?;
                matches!(nodes[id].op, Op::Leaf).then(|| (id, nodes[g].value.clone()))
            })
            .collect();
        Ok(GradMap { grads })
    }
}

fn op_parents(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => {
            vec![a, b]
        }
        Op::Relu(a)
        | Op::Tanh(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::Sum(a)
        | Op::Square(a)
        | Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::SumRows(a)
        | Op::BroadcastRows(a)
        | Op::Expand(a) => vec![a],
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn binary(
        &self,
        name: &'static str,
        other: &Var<'g>,
        eval: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'g>> {
        self.graph.check(other)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            eval(&nodes[self.id].value, &nodes[other.id].value)?
        };
        self.graph.record(name, value, op)
    }

    fn unary(
        &self,
        name: &'static str,
        eval: impl FnOnce(&Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            eval(&nodes[self.id].value)?
        };
        self.graph.record(name, value, op)
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary("add", other, |a, b| a.add(b), Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary("sub", other, |a, b| a.sub(b), Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary("mul", other, |a, b| a.mul(b), Op::Mul(self.id, other.id))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary("matmul", other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    /// Adds a rank-1 bias to every row of a matrix.
    pub fn add_bias(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        self.binary("add_bias", bias, |a, b| a.add_bias(b), Op::AddBias(self.id, bias.id))
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary("relu", |a| Ok(a.relu()), Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.unary("tanh", |a| Ok(a.map(f64::tanh)), Op::Tanh(self.id))
    }

    pub fn sin(&self) -> Result<Var<'g>> {
        self.unary("sin", |a| Ok(a.map(f64::sin)), Op::Sin(self.id))
    }

    pub fn cos(&self) -> Result<Var<'g>> {
        self.unary("cos", |a| Ok(a.map(f64::cos)), Op::Cos(self.id))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'g>> {
        self.unary("sum", |a| Ok(Tensor::scalar(a.sum())), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let n = self.graph.nodes.borrow()[self.id].value.len();
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.unary("square", |a| Ok(a.map(|v| v * v)), Op::Square(self.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.unary("scale", |a| Ok(a.scale(c)), Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        self.unary("transpose", |a| a.transpose(), Op::Transpose(self.id))
    }

    pub fn sum_rows(&self) -> Result<Var<'g>> {
        self.unary("sum_rows", |a| a.sum_rows(), Op::SumRows(self.id))
    }

    pub fn broadcast_rows(&self, rows: usize) -> Result<Var<'g>> {
        self.unary("broadcast_rows", |a| a.broadcast_rows(rows), Op::BroadcastRows(self.id))
    }

    /// Broadcasts a single-element value to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'g>> {
        self.unary(
            "expand",
            |a| {
                if a.len() != 1 {
                    return Err(Error::shape("expand", a.shape(), shape));
                }
                Ok(Tensor::full(shape, a.item()))
            },
            Op::Expand(self.id),
        )
    }

    /// Mean squared difference to `target`.
    pub fn mse(&self, target: &Var<'g>) -> Result<Var<'g>> {
        self.sub(target)?.square()?.mean()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl for<'g> Fn(Var<'g>) -> Result<Var<'g>>, at: f64) -> f64 {
        let g = Graph::new();
        let w = g.leaf(Tensor::scalar(at));
        let y = f(w).unwrap();
        g.backward(y, None).unwrap().get(&w).unwrap().item()
    }

    #[test]
    fn power_rule() {
        assert_eq!(scalar_grad(|w| w.square(), 3.0), 6.0);
    }

    #[test]
    fn sin_derivative_at_zero() {
        assert_eq!(scalar_grad(|w| w.sin(), 0.0), 1.0);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let g = Graph::new();
        let z = g.leaf(Tensor::vector(vec![0.0, -0.0, 1e-300]));
        let y = z.relu().unwrap().sum().unwrap();
        let grads = g.backward(y, None).unwrap();
        assert_eq!(grads.get(&z).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let g = Graph::new();
        let w = g.leaf(Tensor::scalar(2.0));
        let cube = w.square().unwrap().mul(&w).unwrap();
        let dw = g.gradients(cube, None, &[w]).unwrap()[0];
        assert_eq!(dw.value().item(), 12.0);
        let d2w = g.gradients(dw, None, &[w]).unwrap()[0];
        assert_eq!(d2w.value().item(), 12.0);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // y = s * s + s with s = a * b; expanded: dy/da = (2ab + 1) b
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.5));
        let b = g.leaf(Tensor::scalar(-0.5));
        let s = a.mul(&b).unwrap();
        let y = s.mul(&s).unwrap().add(&s).unwrap();
        let grads = g.backward(y, None).unwrap();
        let (av, bv) = (1.5, -0.5);
        assert!((grads.get(&a).unwrap().item() - (2.0 * av * bv + 1.0) * bv).abs() < 1e-15);
        assert!((grads.get(&b).unwrap().item() - (2.0 * av * bv + 1.0) * av).abs() < 1e-15);
    }

    #[test]
    fn seed_shape_is_checked() {
        let g = Graph::new();
        let z = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = z.scale(2.0).unwrap();
        let err = g.backward(y, Some(&Tensor::vector(vec![1.0]))).unwrap_err();
        assert!(matches!(err, Error::SeedShape { .. }));
        let grads = g.backward(y, Some(&Tensor::vector(vec![1.0, -1.0]))).unwrap();
        assert_eq!(grads.get(&z).unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let w = g.leaf(Tensor::scalar(3.0));
        let y = c.mul(&w).unwrap();
        let grads = g.backward(y, None).unwrap();
        assert!(grads.get(&c).is_none());
        assert_eq!(grads.get(&w).unwrap().item(), 2.0);
        let dc = g.gradients(y, None, &[c]).unwrap()[0];
        assert_eq!(dc.value().item(), 0.0);
    }

    #[test]
    fn non_finite_results_are_flagged() {
        let g = Graph::new();
        let w = g.leaf(Tensor::scalar(f64::MAX));
        let err = w.square().unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "square" }));
    }

    #[test]
    fn foreign_nodes_are_rejected() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let a = g1.leaf(Tensor::scalar(1.0));
        let b = g2.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.add(&b), Err(Error::ForeignNode(_))));
    }

    #[test]
    fn relu_matrix_gradient() {
        // f(W) = sum(relu(W z)), W = [[1,-1],[2,0]], z = [1,1]: Wz = [0, 2]
        let g = Graph::new();
        let w = g.leaf(Tensor::from_rows(&[&[1.0, -1.0], &[2.0, 0.0]]));
        let z = g.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let y = w.matmul(&z).unwrap().relu().unwrap().sum().unwrap();
        let dw = g.backward(y, None).unwrap();
        // first row has pre-activation exactly 0, so it is inactive
        assert_eq!(dw.get(&w).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
