//! Arena-based computation graph with eager evaluation and graph-emitting
//! backward (gradients are nodes, so repeated differentiation just works).

use super::tensor::{self, Tensor};
use super::{AdError, AdResult};
use crate::scalar::{lit, Scalar};

/// Handle to a node in a [`Graph`] arena.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Primitive identifiers accepted by [`Graph::apply_primitive`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Tanh,
    Exp,
    Log,
    Sum,
    Mean,
    RowGather,
    Clamp,
    Scale,
    Square,
    Sqrt,
}

/// Producing operation of a node. Parents always carry smaller indices than
/// the node itself (the arena is append-only), which makes reverse index
/// order a valid reverse-topological order for backward sweeps.
#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Recip(NodeId),
    Sign,
    Scale(NodeId, F),
    Clamp(NodeId, F, F),
    Sum(NodeId),
    Mean(NodeId),
    Transpose(NodeId),
    RowGather(NodeId, Vec<usize>),
    RowScatter(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    PadScatter(NodeId, usize),
}

struct NodeData<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only computation graph. Values are computed eagerly and never
/// mutate; `backward` appends the adjoint computation to the same arena.
pub struct Graph<F> {
    nodes: Vec<NodeData<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. Panics on a dangling handle (handles are only minted
    /// by this graph, so that indicates a cross-graph mixup).
    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Single element of a scalar-valued node.
    pub fn value_scalar(&self, id: NodeId) -> AdResult<F> {
        self.nodes[id.0].value.item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Inserts an input node. Non-finite values are rejected here so that the
    /// finite-everywhere invariant holds for the whole arena.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> AdResult<NodeId> {
        if !value.all_finite() {
            return Err(AdError::Numeric("leaf: non-finite input value".into()));
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Inserts a non-differentiable input node.
    pub fn constant(&mut self, value: Tensor<F>) -> AdResult<NodeId> {
        self.leaf(value, false)
    }

    /// Rank-0 constant.
    pub fn scalar_const(&mut self, v: F) -> AdResult<NodeId> {
        self.leaf(Tensor::scalar(v), false)
    }

    /// Detached copy of a node's value (a fresh constant leaf).
    pub fn detach(&mut self, id: NodeId) -> AdResult<NodeId> {
        let v = self.nodes[id.0].value.clone();
        self.leaf(v, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(NodeData {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &str, value: Tensor<F>, op: Op<F>, rg: bool) -> AdResult<NodeId> {
        if !value.all_finite() {
            return Err(AdError::Numeric(format!("{name}: non-finite output")));
        }
        Ok(self.push(value, op, rg))
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // ---- elementwise binaries ------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = tensor::ew_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg2(a, b);
        self.emit("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = tensor::ew_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg2(a, b);
        self.emit("sub", v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = tensor::ew_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg2(a, b);
        self.emit("mul", v, Op::Mul(a, b), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg2(a, b);
        self.emit("matmul", v, Op::MatMul(a, b), rg)
    }

    // ---- unaries --------------------------------------------------------------

    pub fn relu(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        let rg = self.nodes[a.0].requires_grad;
        self.emit("relu", v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.nodes[a.0].requires_grad;
        self.emit("tanh", v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.nodes[a.0].requires_grad;
        self.emit("exp", v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> AdResult<NodeId> {
        if let Some(&bad) = self.value(a).data().iter().find(|v| **v <= F::zero()) {
            return Err(AdError::Domain(format!("log of non-positive value {bad}")));
        }
        let v = self.value(a).map(|x| x.ln());
        let rg = self.nodes[a.0].requires_grad;
        self.emit("log", v, Op::Log(a), rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> AdResult<NodeId> {
        if let Some(&bad) = self.value(a).data().iter().find(|v| **v < F::zero()) {
            return Err(AdError::Domain(format!("sqrt of negative value {bad}")));
        }
        let v = self.value(a).map(|x| x.sqrt());
        let rg = self.nodes[a.0].requires_grad;
        self.emit("sqrt", v, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).map(|x| x * x);
        let rg = self.nodes[a.0].requires_grad;
        self.emit("square", v, Op::Square(a), rg)
    }

    pub fn recip(&mut self, a: NodeId) -> AdResult<NodeId> {
        if self.value(a).data().iter().any(|v| *v == F::zero()) {
            return Err(AdError::Domain("recip of zero".into()));
        }
        let v = self.value(a).map(|x| F::one() / x);
        let rg = self.nodes[a.0].requires_grad;
        self.emit("recip", v, Op::Recip(a), rg)
    }

    /// Elementwise sign. Forward-only: the output never requires grad and its
    /// gradient is defined as zero.
    pub fn sign(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).map(tensor::sign_of);
        self.emit("sign", v, Op::Sign, false)
    }

    /// Multiplies by a host constant.
    pub fn scale(&mut self, a: NodeId, c: F) -> AdResult<NodeId> {
        if !c.is_finite() {
            return Err(AdError::Numeric("scale: non-finite factor".into()));
        }
        let v = self.value(a).map(|x| x * c);
        let rg = self.nodes[a.0].requires_grad;
        self.emit("scale", v, Op::Scale(a, c), rg)
    }

    /// Clamps into `[lo, hi]`. The bounds are constants; gradient is 1 where
    /// the input lies inside the closed interval and 0 outside.
    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> AdResult<NodeId> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(AdError::Domain(format!("clamp: bad interval [{lo}, {hi}]")));
        }
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.nodes[a.0].requires_grad;
        self.emit("clamp", v, Op::Clamp(a, lo, hi), rg)
    }

    // ---- reductions & structure -----------------------------------------------

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = tensor::sum_all(self.value(a));
        let rg = self.nodes[a.0].requires_grad;
        self.emit("sum", v, Op::Sum(a), rg)
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = tensor::mean_all(self.value(a))?;
        let rg = self.nodes[a.0].requires_grad;
        self.emit("mean", v, Op::Mean(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = tensor::transpose(self.value(a))?;
        let rg = self.nodes[a.0].requires_grad;
        self.emit("transpose", v, Op::Transpose(a), rg)
    }

    /// Per-row column pick: (m×c, idx len m) → m×1.
    pub fn row_gather(&mut self, a: NodeId, idx: &[usize]) -> AdResult<NodeId> {
        let v = tensor::row_gather(self.value(a), idx)?;
        let rg = self.nodes[a.0].requires_grad;
        self.emit("row_gather", v, Op::RowGather(a, idx.to_vec()), rg)
    }

    fn row_scatter(&mut self, a: NodeId, idx: &[usize], ncols: usize) -> AdResult<NodeId> {
        let v = tensor::row_scatter(self.value(a), idx, ncols)?;
        let rg = self.nodes[a.0].requires_grad;
        self.emit("row_scatter", v, Op::RowScatter(a, idx.to_vec()), rg)
    }

    /// Flattens and concatenates nodes into a 1-D node.
    pub fn concat(&mut self, parts: &[NodeId]) -> AdResult<NodeId> {
        if parts.is_empty() {
            return Err(AdError::Contract("concat of zero nodes".into()));
        }
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat(&tensors);
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.emit("concat", v, Op::Concat(parts.to_vec()), rg)
    }

    /// Copies a contiguous flat range into a node of the given shape.
    pub fn slice(&mut self, a: NodeId, offset: usize, shape: &[usize]) -> AdResult<NodeId> {
        let v = tensor::slice(self.value(a), offset, shape)?;
        let rg = self.nodes[a.0].requires_grad;
        self.emit("slice", v, Op::Slice(a, offset), rg)
    }

    fn pad_scatter(&mut self, a: NodeId, offset: usize, shape: &[usize]) -> AdResult<NodeId> {
        let v = tensor::pad_scatter(self.value(a), offset, shape)?;
        let rg = self.nodes[a.0].requires_grad;
        self.emit("pad_scatter", v, Op::PadScatter(a, offset), rg)
    }

    // ---- composites -------------------------------------------------------------

    /// Numerically stable log-softmax over the last axis of a 1-D vector or
    /// the rows of a 2-D batch. The row max is subtracted as a detached
    /// constant (exact for the gradient: the max's contributions cancel).
    pub fn log_softmax(&mut self, a: NodeId) -> AdResult<NodeId> {
        match self.value(a).shape() {
            [c] => {
                if *c < 2 {
                    return Err(AdError::Conformance(format!(
                        "log_softmax wants ≥ 2 classes, got {c}"
                    )));
                }
                let m = self
                    .value(a)
                    .data()
                    .iter()
                    .copied()
                    .fold(F::neg_infinity(), F::max);
                let mc = self.scalar_const(m)?;
                let shifted = self.sub(a, mc)?;
                let e = self.exp(shifted)?;
                let s = self.sum(e)?;
                let lse = self.log(s)?;
                self.sub(shifted, lse)
            }
            [r, c] => {
                if *c < 2 {
                    return Err(AdError::Conformance(format!(
                        "log_softmax wants ≥ 2 classes, got {c}"
                    )));
                }
                let (rows, cols) = (*r, *c);
                let mut maxes = Tensor::zeros(vec![rows, cols]);
                for i in 0..rows {
                    let mut m = F::neg_infinity();
                    for j in 0..cols {
                        m = m.max(self.value(a).get2(i, j));
                    }
                    for j in 0..cols {
                        maxes.set2(i, j, m);
                    }
                }
                let mc = self.constant(maxes)?;
                let shifted = self.sub(a, mc)?;
                let e = self.exp(shifted)?;
                let ones_c1 = self.constant(Tensor::ones(vec![cols, 1]))?;
                let rowsum = self.matmul(e, ones_c1)?; // r×1
                let lse = self.log(rowsum)?;
                let ones_1c = self.constant(Tensor::ones(vec![1, cols]))?;
                let lse_full = self.matmul(lse, ones_1c)?; // r×c broadcast
                self.sub(shifted, lse_full)
            }
            s => Err(AdError::Conformance(format!(
                "log_softmax expects 1-D or 2-D logits, got {s:?}"
            ))),
        }
    }

    /// Softmax over the last axis (see [`Graph::log_softmax`] for shapes).
    pub fn softmax(&mut self, a: NodeId) -> AdResult<NodeId> {
        let ls = self.log_softmax(a)?;
        self.exp(ls)
    }

    /// Generic primitive application; the uniform entry point used where op
    /// kind is data. `row_gather` takes its indices, and `clamp`/`scale`
    /// their bounds/factor, as trailing constant nodes (treated as detached
    /// attributes).
    pub fn apply_primitive(&mut self, kind: PrimitiveKind, inputs: &[NodeId]) -> AdResult<NodeId> {
        let want = |n: usize| -> AdResult<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AdError::Conformance(format!(
                    "{kind:?} wants {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            PrimitiveKind::Add => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::Sub => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            PrimitiveKind::Mul => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveKind::MatMul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimitiveKind::Relu => {
                want(1)?;
                self.relu(inputs[0])
            }
            PrimitiveKind::Tanh => {
                want(1)?;
                self.tanh(inputs[0])
            }
            PrimitiveKind::Exp => {
                want(1)?;
                self.exp(inputs[0])
            }
            PrimitiveKind::Log => {
                want(1)?;
                self.log(inputs[0])
            }
            PrimitiveKind::Sum => {
                want(1)?;
                self.sum(inputs[0])
            }
            PrimitiveKind::Mean => {
                want(1)?;
                self.mean(inputs[0])
            }
            PrimitiveKind::Square => {
                want(1)?;
                self.square(inputs[0])
            }
            PrimitiveKind::Sqrt => {
                want(1)?;
                self.sqrt(inputs[0])
            }
            PrimitiveKind::RowGather => {
                want(2)?;
                let idx = self.node_as_indices(inputs[1])?;
                self.row_gather(inputs[0], &idx)
            }
            PrimitiveKind::Clamp => {
                want(3)?;
                let lo = self.value_scalar(inputs[1])?;
                let hi = self.value_scalar(inputs[2])?;
                self.clamp(inputs[0], lo, hi)
            }
            PrimitiveKind::Scale => {
                want(2)?;
                let c = self.value_scalar(inputs[1])?;
                self.scale(inputs[0], c)
            }
        }
    }

    fn node_as_indices(&self, id: NodeId) -> AdResult<Vec<usize>> {
        self.value(id)
            .data()
            .iter()
            .map(|&v| {
                let u = v.to_usize();
                match u {
                    Some(u) if F::from_usize(u) == Some(v) => Ok(u),
                    _ => Err(AdError::Domain(format!(
                        "index node holds non-integral or negative value {v}"
                    ))),
                }
            })
            .collect()
    }

    // ---- backward ----------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `root`. Returns ∂root/∂wrt_i, one node
    /// per requested handle; zeros for handles outside the root's ancestry.
    ///
    /// With `create_graph` the returned gradients remain connected to the
    /// arena and can be differentiated again; without it they are detached
    /// value copies.
    pub fn backward(
        &mut self,
        root: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> AdResult<Vec<NodeId>> {
        if !self.value(root).is_scalar() {
            return Err(AdError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            let seed_shape = self.value(root).shape().to_vec();
            adj[root.0] = Some(self.constant(Tensor::ones(seed_shape))?);
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            // The op is cloned so `self` stays free for emission; ops hold
            // only handles and small attribute payloads.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let ga = self.reduce_to(g, a)?;
                    self.accumulate(&mut adj, a, ga)?;
                    let gb = self.reduce_to(g, b)?;
                    self.accumulate(&mut adj, b, gb)?;
                }
                Op::Sub(a, b) => {
                    let ga = self.reduce_to(g, a)?;
                    self.accumulate(&mut adj, a, ga)?;
                    let neg = self.scale(g, -F::one())?;
                    let gb = self.reduce_to(neg, b)?;
                    self.accumulate(&mut adj, b, gb)?;
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let m = self.mul(g, b)?;
                        let ga = self.reduce_to(m, a)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let m = self.mul(g, a)?;
                        let gb = self.reduce_to(m, b)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink.
                    let mask = self
                        .value(a)
                        .map(|x| if x > F::zero() { F::one() } else { F::zero() });
                    let mc = self.constant(mask)?;
                    let ga = self.mul(g, mc)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Tanh(a) => {
                    let y = NodeId(i);
                    let y2 = self.square(y)?;
                    let one = self.scalar_const(F::one())?;
                    let d = self.sub(one, y2)?;
                    let ga = self.mul(g, d)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, NodeId(i))?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Log(a) => {
                    let r = self.recip(a)?;
                    let ga = self.mul(g, r)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Sqrt(a) => {
                    let r = self.recip(NodeId(i))?;
                    let half = self.scale(r, lit::<F>(0.5))?;
                    let ga = self.mul(g, half)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Square(a) => {
                    let two_a = self.scale(a, lit::<F>(2.0))?;
                    let ga = self.mul(g, two_a)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Recip(a) => {
                    // d(1/x)/dx = −1/x² = −y².
                    let y2 = self.square(NodeId(i))?;
                    let neg = self.scale(y2, -F::one())?;
                    let ga = self.mul(g, neg)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Sign => unreachable!("sign nodes never require grad"),
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self.value(a).map(|x| {
                        if x >= lo && x <= hi {
                            F::one()
                        } else {
                            F::zero()
                        }
                    });
                    let mc = self.constant(mask)?;
                    let ga = self.mul(g, mc)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Sum(a) => {
                    let ones = self.constant(Tensor::ones(self.value(a).shape().to_vec()))?;
                    let ga = self.mul(ones, g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Mean(a) => {
                    let n = self.value(a).numel();
                    let ones = self.constant(Tensor::ones(self.value(a).shape().to_vec()))?;
                    let spread = self.mul(ones, g)?;
                    let ga = self.scale(spread, F::one() / lit::<F>(n as f64))?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::RowGather(a, idx) => {
                    let ncols = self.value(a).dims2()?.1;
                    let ga = self.row_scatter(g, &idx, ncols)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::RowScatter(a, idx) => {
                    let ga = self.row_gather(g, &idx)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0usize;
                    for p in parts {
                        let n = self.value(p).numel();
                        if self.nodes[p.0].requires_grad {
                            let shape = self.value(p).shape().to_vec();
                            let gp = self.slice(g, offset, &shape)?;
                            self.accumulate(&mut adj, p, gp)?;
                        }
                        offset += n;
                    }
                }
                Op::Slice(a, offset) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.pad_scatter(g, offset, &shape)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::PadScatter(a, offset) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.slice(g, offset, &shape)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let found = adj.get(w.0).copied().flatten();
            let id = match found {
                Some(gid) if create_graph => gid,
                Some(gid) => self.detach(gid)?,
                None => self.constant(Tensor::zeros(self.value(w).shape().to_vec()))?,
            };
            out.push(id);
        }
        Ok(out)
    }

    /// Adds a contribution into the running adjoint of `target` (only called
    /// for grad-requiring targets).
    fn accumulate(
        &mut self,
        adj: &mut Vec<Option<NodeId>>,
        target: NodeId,
        contrib: NodeId,
    ) -> AdResult<()> {
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        let merged = match adj[target.0] {
            None => contrib,
            Some(existing) => self.add(existing, contrib)?,
        };
        adj[target.0] = Some(merged);
        Ok(())
    }

    /// Collapses a contribution onto the shape of `target` when the forward
    /// op broadcast a one-element tensor: the adjoint of the broadcast side
    /// is the sum of the elementwise contribution.
    fn reduce_to(&mut self, contrib: NodeId, target: NodeId) -> AdResult<NodeId> {
        let cs = self.value(contrib).shape().to_vec();
        let ts = self.value(target).shape().to_vec();
        if cs == ts {
            Ok(contrib)
        } else if self.value(target).is_scalar() {
            self.sum(contrib)
        } else if self.value(contrib).is_scalar() {
            // Scalar contribution spread over a non-scalar target: the forward
            // op broadcast the *other* side; replicate the contribution.
            let ones = self.constant(Tensor::ones(ts))?;
            self.mul(ones, contrib)
        } else {
            Err(AdError::Contract(format!(
                "adjoint shape {cs:?} incompatible with target {ts:?}"
            )))
        }
    }
}
