// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation over the small op set used by the
//! masked transformer.
//!
//! Nodes are appended in evaluation order, so insertion order is a valid
//! topological order. Only nodes created with [`Graph::parameter`] are
//! trainable; every node that does not depend on a parameter is frozen and is
//! skipped entirely during the backward sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{DlensError, Result};
use crate::tensor::{self, gelu_grad_scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulNt(NodeId, NodeId),
    MatMulShared(NodeId, Arc<Tensor>),
    MatMulNtShared(NodeId, Arc<Tensor>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f32),
    Softmax(NodeId),
    LayerNorm {
        input: NodeId,
        gamma: Vec<f32>,
        normalized: Tensor,
        inv_std: Vec<f32>,
    },
    Gelu(NodeId),
    AugmentOnes(NodeId),
    SelectRow(NodeId, usize),
    Sum(NodeId),
    Kl {
        logits: NodeId,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    trainable: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kl_clamps: usize,
}

/// Gradients keyed by parameter node.
pub type Gradients = HashMap<NodeId, Tensor>;

/// Probability floor used inside the KL term.
pub const KL_FLOOR: f64 = 1e-12;

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

    /// Number of KL terms where a zero model probability was clamped.
    pub fn kl_clamps(&self) -> usize {
        self.kl_clamps
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Frozen input (weights, cached activations).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.nodes[id.0].trainable = true;
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn rg(&self, a: NodeId) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.rg(a) || self.rg(b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(Op::MatMulNt(a, b), v, rg))
    }

    /// `a · b` for a frozen matrix shared across graphs.
    pub fn matmul_shared(&mut self, a: NodeId, b: &Arc<Tensor>) -> Result<NodeId> {
        let v = self.value(a).matmul(b)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MatMulShared(a, Arc::clone(b)), v, rg))
    }

    /// `a · bᵀ` for a frozen matrix shared across graphs.
    pub fn matmul_nt_shared(&mut self, a: NodeId, b: &Arc<Tensor>) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(b)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MatMulNtShared(a, Arc::clone(b)), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    /// Matrix `a` times vector `v` broadcast over rows.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.value(a).mul_row_vector(self.value(v).data())?;
        let rg = self.rg2(a, v);
        Ok(self.push(Op::MulRow(a, v), out, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), v, rg)
    }

    /// Causal row softmax.
    pub fn softmax_causal(&mut self, a: NodeId) -> NodeId {
        let v = tensor::softmax_rows(self.value(a), true);
        let rg = self.rg(a);
        self.push(Op::Softmax(a), v, rg)
    }

    pub fn layer_norm(&mut self, a: NodeId, gamma: &[f32], beta: &[f32], eps: f32) -> Result<NodeId> {
        let (v, stats) = tensor::layer_norm_with_stats(self.value(a), gamma, beta, eps)?;
        let rg = self.rg(a);
        let op = Op::LayerNorm {
            input: a,
            gamma: gamma.to_vec(),
            normalized: stats.normalized,
            inv_std: stats.inv_std,
        };
        Ok(self.push(op, v, rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = tensor::gelu(self.value(a));
        let rg = self.rg(a);
        self.push(Op::Gelu(a), v, rg)
    }

    /// `x ↦ [1, x]` row-wise.
    pub fn augment_ones(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).augment_ones();
        let rg = self.rg(a);
        self.push(Op::AugmentOnes(a), v, rg)
    }

    /// Row `i` of a matrix as a `[1, cols]` matrix.
    pub fn select_row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        if i >= self.value(a).rows() {
            return Err(DlensError::Index(format!("row {i} of {} rows", self.value(a).rows())));
        }
        let v = self.value(a).row_tensor(i);
        let rg = self.rg(a);
        Ok(self.push(Op::SelectRow(a, i), v, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum() as f32);
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    /// `KL(target ‖ softmax(logits))` in nats, as a scalar.
    ///
    /// Model probabilities below [`KL_FLOOR`] are clamped where the target has
    /// mass; each such event is counted in [`Graph::kl_clamps`].
    pub fn kl_to_logits(&mut self, logits: NodeId, target: &[f64]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.len() != target.len() {
            return Err(DlensError::Shape(format!(
                "kl: {} logits vs {} target probabilities",
                z.len(),
                target.len()
            )));
        }
        let logq = tensor::log_softmax64(z.data());
        let mut kl = 0.0f64;
        for (&p, &lq) in target.iter().zip(&logq) {
            if p > 0.0 {
                let lq = if lq < KL_FLOOR.ln() {
                    self.kl_clamps += 1;
                    KL_FLOOR.ln()
                } else {
                    lq
                };
                kl += p * (p.ln() - lq);
            }
        }
        let probs = logq.iter().map(|l| l.exp()).collect();
        let rg = self.rg(logits);
        let op = Op::Kl {
            logits,
            target: target.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::scalar(kl as f32), rg))
    }

    /// Reverse sweep from a scalar `loss`; returns the gradient of every
    /// trainable parameter (zeros for parameters the loss does not reach).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let params: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(NodeId)
            .collect();
        if params.is_empty() {
            return Err(DlensError::Invalid(
                "backward on a graph with no trainable parameters".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(DlensError::Shape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if node.trainable {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        Ok(params
            .into_iter()
            .map(|p| {
                let g = grads
                    .get_mut(p.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.value(p).shape()));
                (p, g)
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = g.matmul_tn(self.value(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulShared(a, b) => self.accumulate(grads, *a, g.matmul_nt(b)?)?,
            Op::MatMulNtShared(a, b) => self.accumulate(grads, *a, g.matmul(b)?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::MulRow(a, v) => {
                if self.rg(*a) {
                    let ga = g.mul_row_vector(self.value(*v).data())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*v) {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut gv = vec![0.0f64; n];
                    for i in 0..av.rows() {
                        for ((s, &x), &gi) in gv.iter_mut().zip(av.row(i)).zip(g.row(i)) {
                            *s += x as f64 * gi as f64;
                        }
                    }
                    let gv = Tensor::new(
                        self.value(*v).shape().to_vec(),
                        gv.into_iter().map(|x| x as f32).collect(),
                    )?;
                    self.accumulate(grads, *v, gv)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(&p, &q)| p as f64 * q as f64).sum();
                    for ((o, &p), &q) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (p as f64 * (q as f64 - dot)) as f32;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::LayerNorm {
                input,
                gamma,
                normalized,
                inv_std,
            } => {
                let d = gamma.len();
                let mut ga = Tensor::zeros(normalized.shape());
                for i in 0..normalized.rows() {
                    let n = normalized.row(i);
                    let gn: Vec<f64> = g.row(i).iter().zip(gamma).map(|(&a, &b)| a as f64 * b as f64).collect();
                    let mean_gn = gn.iter().sum::<f64>() / d as f64;
                    let mean_gnn = gn.iter().zip(n).map(|(&a, &b)| a * b as f64).sum::<f64>() / d as f64;
                    let r = inv_std[i] as f64;
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = (r * (gn[j] - mean_gn - n[j] as f64 * mean_gnn)) as f32;
                    }
                }
                self.accumulate(grads, *input, ga)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let ga = Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * gelu_grad_scalar(xv))
                        .collect(),
                )?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::AugmentOnes(a) => {
                let ga = g.column_slice(1, g.cols());
                let ga = ga.reshape(self.value(*a).shape().to_vec())?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::SelectRow(a, i) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                ga.row_mut(*i).copy_from_slice(g.data());
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.value(*a).shape(), g.item());
                self.accumulate(grads, *a, ga)?;
            }
            Op::Kl { logits, target, probs } => {
                let s = g.item() as f64;
                let gz = Tensor::new(
                    self.value(*logits).shape().to_vec(),
                    probs.iter().zip(target).map(|(&q, &p)| (s * (q - p)) as f32).collect(),
                )?;
                self.accumulate(grads, *logits, gz)?;
            }
        }
        Ok(())
    }
}
