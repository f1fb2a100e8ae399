//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as it runs; [`Tape::backward`] sweeps
//! the recording in reverse and accumulates chain-rule gradients for every
//! node. Nodes are created strictly after their parents, so creation order is
//! already a topological order and the parent graph is acyclic by
//! construction.
//!
//! The tape is deliberately not thread-safe (`RefCell` inside): a graph is
//! built and differentiated on one thread. The `Matrix` values themselves are
//! plain immutable data and can be shared freely.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::matrix::{sigmoid, Matrix};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Hadamard,
    Relu,
    Softplus,
    Log,
    Exp,
    Scale(f64),
    LogSoftmaxRows,
    Sum,
    BroadcastRows,
}

struct Node {
    value: Matrix,
    op: Op,
    parents: Vec<NodeId>,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`, or None when the node does not
    /// reach the loss.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Matrix, op: Op, parents: Vec<NodeId>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, parents });
        NodeId(nodes.len() - 1)
    }

    /// Insert a differentiable leaf (a parameter).
    pub fn leaf(&self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, vec![])
    }

    /// Insert a non-parameter input. Gradients are still computed for it but
    /// callers simply never read them.
    pub fn constant(&self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, vec![])
    }

    pub fn value(&self, id: NodeId) -> Matrix {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[id.0].value.rows(), nodes[id.0].value.cols())
    }

    fn binary(&self, op: Op, f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(value, op, vec![a, b]))
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Matrix) -> Result<Matrix>, a: NodeId) -> Result<NodeId> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)?
        };
        Ok(self.push(value, op, vec![a]))
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::MatMul, |x, y| x.matmul(y), a, b)
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, |x, y| x.add(y), a, b)
    }

    pub fn hadamard(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Hadamard, |x, y| x.hadamard(y), a, b)
    }

    pub fn relu(&self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, |x| Ok(x.relu()), a)
    }

    pub fn softplus(&self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Softplus, |x| Ok(x.softplus()), a)
    }

    pub fn log(&self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, |x| x.ln(), a)
    }

    pub fn exp(&self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, |x| x.exp(), a)
    }

    pub fn scale(&self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(Op::Scale(factor), |x| Ok(x.scale(factor)), a)
    }

    pub fn log_softmax_rows(&self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::LogSoftmaxRows, |x| Ok(x.log_softmax_rows()), a)
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sum, |x| Ok(Matrix::scalar(x.sum())), a)
    }

    /// Tile a 1xC node into an NxC node.
    pub fn broadcast_rows(&self, a: NodeId, rows: usize) -> Result<NodeId> {
        self.unary(Op::BroadcastRows, |x| x.broadcast_rows(rows), a)
    }

    /// a - b, composed from the primitive ops.
    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Entrywise reciprocal of a strictly positive node: exp(-log x).
    pub fn recip_positive(&self, a: NodeId) -> Result<NodeId> {
        let ln = self.log(a)?;
        let neg = self.scale(ln, -1.0)?;
        self.exp(neg)
    }

    /// Reverse sweep from a scalar root. Returns the gradient of the root
    /// w.r.t. every node on the tape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if root_node.value.rows() != 1 || root_node.value.cols() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "root must be scalar, got {}x{}",
                    root_node.value.rows(),
                    root_node.value.cols()
                ),
            ));
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(out_grad) = grads[idx].clone() else {
                continue;
            };
            let node = &nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::MatMul => {
                    let a = &nodes[node.parents[0].0].value;
                    let b = &nodes[node.parents[1].0].value;
                    let da = out_grad.matmul(&b.transpose())?;
                    let db = a.transpose().matmul(&out_grad)?;
                    accumulate(&mut grads, node.parents[0], da)?;
                    accumulate(&mut grads, node.parents[1], db)?;
                }
                Op::Add => {
                    accumulate(&mut grads, node.parents[0], out_grad.clone())?;
                    accumulate(&mut grads, node.parents[1], out_grad.clone())?;
                }
                Op::Hadamard => {
                    let a = &nodes[node.parents[0].0].value;
                    let b = &nodes[node.parents[1].0].value;
                    accumulate(&mut grads, node.parents[0], out_grad.hadamard(b)?)?;
                    accumulate(&mut grads, node.parents[1], out_grad.hadamard(a)?)?;
                }
                Op::Relu => {
                    let x = &nodes[node.parents[0].0].value;
                    let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, node.parents[0], out_grad.hadamard(&mask)?)?;
                }
                Op::Softplus => {
                    let x = &nodes[node.parents[0].0].value;
                    accumulate(&mut grads, node.parents[0], out_grad.hadamard(&x.map(sigmoid))?)?;
                }
                Op::Log => {
                    let x = &nodes[node.parents[0].0].value;
                    let dx = out_grad.hadamard(&x.map(|v| 1.0 / v))?;
                    accumulate(&mut grads, node.parents[0], dx)?;
                }
                Op::Exp => {
                    // node.value already holds e^x
                    accumulate(&mut grads, node.parents[0], out_grad.hadamard(&node.value)?)?;
                }
                Op::Scale(factor) => {
                    accumulate(&mut grads, node.parents[0], out_grad.scale(factor))?;
                }
                Op::LogSoftmaxRows => {
                    // dx = dy - softmax(x) * rowsum(dy)
                    let y = &node.value;
                    let mut dx = out_grad.clone();
                    for r in 0..dx.rows() {
                        let dy_sum: f64 = out_grad.row(r).iter().sum();
                        for c in 0..dx.cols() {
                            let p = y.get(r, c).exp();
                            dx.set(r, c, out_grad.get(r, c) - p * dy_sum);
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dx)?;
                }
                Op::Sum => {
                    let x = &nodes[node.parents[0].0].value;
                    let g = out_grad.item();
                    let dx = Matrix::zeros(x.rows(), x.cols()).map(|_| g);
                    accumulate(&mut grads, node.parents[0], dx)?;
                }
                Op::BroadcastRows => {
                    accumulate(&mut grads, node.parents[0], out_grad.column_sums())?;
                }
            }
        }

        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
    grads[id.0] = Some(match grads[id.0].take() {
        Some(g) => g.add(&delta)?,
        None => delta,
    });
    Ok(())
}
