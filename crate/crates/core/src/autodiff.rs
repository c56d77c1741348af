//! A small tape of 2-D tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and the backward pass is a single reverse sweep
//! that visits each node once.

use crate::error::{Error, Result};
use crate::quant::QuantConfig;
use crate::ste::FakeQuantTape;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Tanh(NodeId),
    Sub(NodeId, NodeId),
    /// Mean of squared entries, a `1x1` result.
    MeanSquare(NodeId),
    /// `a + alpha * b`
    AddScaled(NodeId, NodeId, f64),
    /// Quantize then de-quantize with STE gradients.
    FakeQuant(NodeId, Box<FakeQuantTape>),
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMulT(..) => "matmul_t",
            Op::Tanh(_) => "tanh",
            Op::Sub(..) => "sub",
            Op::MeanSquare(_) => "mean_square",
            Op::AddScaled(..) => "add_scaled",
            Op::FakeQuant(..) => "fake_quant",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Tanh(a) | Op::MeanSquare(a) | Op::FakeQuant(a, _) => vec![*a],
            Op::MatMulT(a, b) | Op::Sub(a, b) | Op::AddScaled(a, b, _) => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradNode {
    pub value: Tensor2D,
    pub adjoint: Tensor2D,
    pub op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<GradNode>,
}

fn matmul_t(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols() != b.cols() {
        return Err(Error::dim(format!(
            "matmul_t inner dims differ: {:?} · {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for ar in a.row_iter() {
        for br in b.row_iter() {
            out.push(ar.iter().zip(br).map(|(x, y)| x * y).sum());
        }
    }
    Tensor2D::new(a.rows(), b.rows(), out)
}

fn accumulate(dst: &mut Tensor2D, src: &Tensor2D, alpha: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += alpha * s;
    }
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

    pub fn node(&self, id: NodeId) -> &GradNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].value
    }

    pub fn adjoint(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].adjoint
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> NodeId {
        let (r, c) = value.shape();
        let adjoint = Tensor2D::zeros(r, c).expect("node values are non-empty");
        self.nodes.push(GradNode { value, adjoint, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor2D) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_t(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        x.ensure_same_shape(y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let v = Tensor2D::new(x.rows(), x.cols(), data)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mean_square(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let m = x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        self.push(Tensor2D::new(1, 1, vec![m]).unwrap(), Op::MeanSquare(a))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, alpha: f64) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        x.ensure_same_shape(y)?;
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| p + alpha * q)
            .collect();
        let v = Tensor2D::new(x.rows(), x.cols(), data)?;
        Ok(self.push(v, Op::AddScaled(a, b, alpha)))
    }

    /// Fake-quantizes `a` under `cfg`; see [`crate::ste`] for the gradient rules.
    pub fn fake_quant(&mut self, a: NodeId, cfg: &QuantConfig) -> Result<NodeId> {
        let (deq, tape) = FakeQuantTape::forward(self.value(a), cfg)?;
        Ok(self.push(deq, Op::FakeQuant(a, Box::new(tape))))
    }

    /// Back-propagates from a scalar `root` with seed 1.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::dim(
                "backward() needs a 1x1 root; use backward_with_seed",
            ));
        }
        let seed = Tensor2D::new(1, 1, vec![1.0])?;
        self.backward_with_seed(root, &seed)
    }

    /// Back-propagates an arbitrary output adjoint (a vector-Jacobian product).
    pub fn backward_with_seed(&mut self, root: NodeId, seed: &Tensor2D) -> Result<()> {
        self.value(root).ensure_same_shape(seed)?;
        for n in &mut self.nodes {
            n.adjoint.data_mut().fill(0.0);
        }
        self.nodes[root.0].adjoint = seed.clone();
        for i in (0..=root.0).rev() {
            let g = self.nodes[i].adjoint.clone();
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::MatMulT(a, b) => {
                    // out = A Bᵀ: dA = G B, dB = Gᵀ A
                    let da = matmul_t(&g, &self.value(*b).transpose())?;
                    let db = matmul_t(&g.transpose(), &self.value(*a).transpose())?;
                    accumulate(&mut self.nodes[a.0].adjoint, &da, 1.0);
                    accumulate(&mut self.nodes[b.0].adjoint, &db, 1.0);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let d = Tensor2D::new(
                        y.rows(),
                        y.cols(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(t, gv)| gv * (1.0 - t * t))
                            .collect(),
                    )?;
                    accumulate(&mut self.nodes[a.0].adjoint, &d, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut self.nodes[a.0].adjoint, &g, 1.0);
                    accumulate(&mut self.nodes[b.0].adjoint, &g, -1.0);
                }
                Op::MeanSquare(a) => {
                    let x = self.value(*a);
                    let k = 2.0 * g.data()[0] / x.len() as f64;
                    let d = x.map(|v| k * v);
                    accumulate(&mut self.nodes[a.0].adjoint, &d, 1.0);
                }
                Op::AddScaled(a, b, alpha) => {
                    accumulate(&mut self.nodes[a.0].adjoint, &g, 1.0);
                    accumulate(&mut self.nodes[b.0].adjoint, &g, *alpha);
                }
                Op::FakeQuant(a, tape) => {
                    let d = tape.backward(self.value(*a), &g)?;
                    accumulate(&mut self.nodes[a.0].adjoint, &d, 1.0);
                }
            }
            self.nodes[i].op = op;
        }
        Ok(())
    }
}
