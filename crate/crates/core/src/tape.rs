//! Gradient tape over the primitive set in [`crate::ops`].
//!
//! Layers are written once against the [`Graph`] trait and run either eagerly
//! ([`Eager`], nothing recorded) or on a [`Tape`], which keeps every forward
//! activation by value so the same recording can be replayed any number of
//! times with different seeds.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operations a layer can be built from.
pub trait Graph {
    type Var: Clone;

    fn input(&mut self, value: Tensor) -> Self::Var;
    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Tensor;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Result<Self::Var>;
    fn channel_max(&mut self, q: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, a: &Self::Var, s: f64) -> Self::Var;
    fn sigmoid(&mut self, a: &Self::Var) -> Self::Var;
    fn tanh(&mut self, a: &Self::Var) -> Self::Var;
    fn relu(&mut self, a: &Self::Var) -> Self::Var;
}

/// Untaped evaluation: every op returns its value and nothing else.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Var = Tensor;

    fn input(&mut self, value: Tensor) -> Tensor {
        value
    }
    fn value<'a>(&'a self, var: &'a Tensor) -> &'a Tensor {
        var
    }
    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        ops::conv2d(x, w, b)
    }
    fn channel_max(&mut self, q: &Tensor) -> Result<Tensor> {
        Ok(ops::channel_max(q)?.0)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, "add", |x, y| x + y)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, "sub", |x, y| x - y)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, "mul", |x, y| x * y)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        a.scale(s)
    }
    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        a.map(ops::sigmoid)
    }
    fn tanh(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::tanh)
    }
    fn relu(&mut self, a: &Tensor) -> Tensor {
        a.map(|x| x.max(0.0))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    ChannelMax {
        q: NodeId,
        argmax: Vec<usize>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    CrossEntropy {
        logits: NodeId,
        probs: Tensor,
        targets: Vec<u8>,
        count: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive applications. Inputs always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    replays: AtomicUsize,
}

/// Cotangents for every node reached by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    reached: Vec<bool>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Cotangent for `id`, or zeros shaped like `like` if the node was not reached.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros_like(like))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Whether the backward pass propagated a cotangent through `id`.
    pub fn reached(&self, id: NodeId) -> bool {
        self.reached.get(id.0).copied().unwrap_or(false)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn value_of(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Winning channels recorded by a channel-max node.
    pub fn argmax_of(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::ChannelMax { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Activation floats held for the backward pass (leaf inputs excluded).
    pub fn stored_floats(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Leaf => 0,
                Op::ChannelMax { argmax, .. } => n.value.numel() + argmax.len(),
                Op::CrossEntropy { probs, .. } => n.value.numel() + probs.numel(),
                _ => n.value.numel(),
            })
            .sum()
    }

    /// Cells of the channel-max node `id` whose runner-up lies within `tol`
    /// of the maximum, i.e. where the max is not differentiable. Zero for
    /// any other node.
    pub fn near_ties_at(&self, id: NodeId, tol: f64) -> usize {
        let Op::ChannelMax { q, argmax } = &self.nodes[id.0].op else {
            return 0;
        };
        let d = self.value_of(*q).data();
        let plane = argmax.len();
        let channels = d.len() / plane;
        argmax
            .iter()
            .enumerate()
            .filter(|&(i, &best)| (0..channels).any(|c| c != best && d[best * plane + i] - d[c * plane + i] <= tol))
            .count()
    }

    /// Number of completed [`Tape::backward`] calls.
    pub fn replays(&self) -> usize {
        self.replays.load(Ordering::Relaxed)
    }

    /// Mean masked cross-entropy; see [`ops::masked_cross_entropy`].
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u8]) -> Result<NodeId> {
        let (loss, probs, count) = ops::masked_cross_entropy(self.value_of(logits), targets)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                count,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse replay from `output` seeded with `seed`.
    ///
    /// The tape itself is left untouched, so the call can be repeated.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(shape_err(
                "backward",
                format!("seed shape {:?} does not match output {:?}", seed.shape(), out_shape),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        let mut reached = vec![false; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            reached[idx] = true;
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) = ops::conv2d_vjp(self.value_of(*x), self.value_of(*w), &g)?;
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *w, dw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::ChannelMax { q, argmax } => {
                    let gq = ops::channel_max_vjp(self.value_of(*q).shape(), argmax, &g)?;
                    accumulate(&mut grads, *q, gq)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value_of(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_map(self.value_of(*a), "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, "sigmoid", |gv, s| gv * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, "tanh", |gv, t| gv * (1.0 - t * t))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value_of(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    count,
                } => {
                    let gl = ops::masked_cross_entropy_vjp(probs, targets, *count, g.data()[0]);
                    accumulate(&mut grads, *logits, gl)?;
                }
            }
            // Interior cotangents are consumed; only leaves keep theirs. The
            // seeded output is kept too so callers can inspect it.
            if idx == output.0 {
                grads[idx] = Some(seed.clone());
            }
        }
        self.replays.fetch_add(1, Ordering::Relaxed);
        Ok(Gradients { grads, reached })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl Graph for Tape {
    type Var = NodeId;

    fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value)
    }
    fn value<'a>(&'a self, var: &'a NodeId) -> &'a Tensor {
        self.value_of(*var)
    }
    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: Option<&NodeId>) -> Result<NodeId> {
        let out = ops::conv2d(self.value_of(*x), self.value_of(*w), b.map(|b| self.value_of(*b)))?;
        Ok(self.push(
            Op::Conv2d {
                x: *x,
                w: *w,
                b: b.copied(),
            },
            out,
        ))
    }
    fn channel_max(&mut self, q: &NodeId) -> Result<NodeId> {
        let (v, argmax) = ops::channel_max(self.value_of(*q))?;
        Ok(self.push(Op::ChannelMax { q: *q, argmax }, v))
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = self.value_of(*a).zip_map(self.value_of(*b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(*a, *b), v))
    }
    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = self.value_of(*a).zip_map(self.value_of(*b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(*a, *b), v))
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = self.value_of(*a).zip_map(self.value_of(*b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(*a, *b), v))
    }
    fn scale(&mut self, a: &NodeId, s: f64) -> NodeId {
        let v = self.value_of(*a).scale(s);
        self.push(Op::Scale(*a, s), v)
    }
    fn sigmoid(&mut self, a: &NodeId) -> NodeId {
        let v = self.value_of(*a).map(ops::sigmoid);
        self.push(Op::Sigmoid(*a), v)
    }
    fn tanh(&mut self, a: &NodeId) -> NodeId {
        let v = self.value_of(*a).map(f64::tanh);
        self.push(Op::Tanh(*a), v)
    }
    fn relu(&mut self, a: &NodeId) -> NodeId {
        let v = self.value_of(*a).map(|x| x.max(0.0));
        self.push(Op::Relu(*a), v)
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}
