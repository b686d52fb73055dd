//! The classifier backbone and the perturbation network.
//!
//! Both are plain MLPs expressed over the autodiff graph so that training can
//! differentiate through them (including through a virtual optimizer step).
//! The classifier exposes its penultimate activations ("features") and its
//! final-layer weight matrix, both of which feed the per-sample training
//! characteristics. The perturbation network maps a normalized 10-feature
//! characteristic vector to a logit offset δ ∈ R^C; its output layer starts
//! at zero so that a fresh run is indistinguishable from the unperturbed
//! baseline until the meta updates move it.

use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::scalar::{lit, Scalar};
use crate::tensorad::{tensor, AdError, AdResult, Graph, NodeId, Tensor};

/// Width of the characteristic vector consumed by [`PerturbNet`].
pub const CHAR_WIDTH: usize = crate::characteristics::NUM_CHARACTERISTICS;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Graph handles for one network's parameters, in flatten order
/// (`w0, b0, w1, b1, …`). Produced by `bind`/`bind_frozen` or assembled from
/// virtual (graph-computed) parameter nodes.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl BoundParams {
    /// All handles in flatten order.
    pub fn nodes(&self) -> Vec<NodeId> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }

    /// Rebuilds the pairing from a flat node list (inverse of [`Self::nodes`]).
    pub fn from_nodes(nodes: &[NodeId]) -> ModelResult<Self> {
        if nodes.len() % 2 != 0 {
            return Err(ModelError::Config(format!(
                "expected weight/bias pairs, got {} nodes",
                nodes.len()
            )));
        }
        let mut weights = Vec::with_capacity(nodes.len() / 2);
        let mut biases = Vec::with_capacity(nodes.len() / 2);
        for pair in nodes.chunks(2) {
            weights.push(pair[0]);
            biases.push(pair[1]);
        }
        Ok(Self { weights, biases })
    }
}

/// Sequence of (weight, bias) layer tensors with shared plumbing for both
/// networks. Weight `i` is `in_i×out_i`, bias `i` is `1×out_i`.
#[derive(Clone, Debug)]
struct Stack<F> {
    weights: Vec<Tensor<F>>,
    biases: Vec<Tensor<F>>,
}

impl<F: Scalar> Stack<F> {
    /// He-style init: weights ~ N(0, √(2/fan_in)), zero biases. `zero_last`
    /// additionally zeroes the final weight matrix.
    fn init(dims: &[usize], seed: u64, zero_last: bool) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (li, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let last = li + 1 == dims.len() - 1;
            let std = lit::<F>((2.0 / fan_in as f64).sqrt());
            let data: Vec<F> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: F = StandardNormal.sample(&mut rng);
                    if zero_last && last {
                        F::zero()
                    } else {
                        z * std
                    }
                })
                .collect();
            weights.push(Tensor::from_vec(vec![fan_in, fan_out], data).expect("sized init"));
            biases.push(Tensor::zeros(vec![1, fan_out]));
        }
        Self { weights, biases }
    }

    fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.numel() + b.numel())
            .sum()
    }

    fn flatten(&self) -> Tensor<F> {
        let parts: Vec<&Tensor<F>> = self
            .weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect();
        tensor::concat(&parts)
    }

    fn assign(&mut self, flat: &Tensor<F>) -> ModelResult<()> {
        if flat.numel() != self.param_count() {
            return Err(ModelError::Config(format!(
                "flat parameter length {} != parameter count {}",
                flat.numel(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for i in 0..self.weights.len() {
            for t in [&mut self.weights[i], &mut self.biases[i]] {
                let n = t.numel();
                let shape = t.shape().to_vec();
                *t = tensor::slice(flat, offset, &shape)?;
                offset += n;
            }
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph<F>, requires_grad: bool) -> AdResult<BoundParams> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            weights.push(g.leaf(w.clone(), requires_grad)?);
            biases.push(g.leaf(b.clone(), requires_grad)?);
        }
        Ok(BoundParams { weights, biases })
    }

    /// Splits a flat 1-D node into graph-connected parameter nodes; gradients
    /// flow through the slices back to `flat`.
    fn params_from_flat(&self, g: &mut Graph<F>, flat: NodeId) -> AdResult<BoundParams> {
        if g.value(flat).numel() != self.param_count() {
            return Err(AdError::Conformance(format!(
                "flat parameter node length {} != parameter count {}",
                g.value(flat).numel(),
                self.param_count()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let wn = g.slice(flat, offset, w.shape())?;
            offset += w.numel();
            let bn = g.slice(flat, offset, b.shape())?;
            offset += b.numel();
            weights.push(wn);
            biases.push(bn);
        }
        Ok(BoundParams { weights, biases })
    }

    /// Forward through the stack with ReLU between layers (none after the
    /// last). Returns the activation entering the final layer and the output.
    fn forward(
        &self,
        g: &mut Graph<F>,
        params: &BoundParams,
        x: NodeId,
    ) -> AdResult<(NodeId, NodeId)> {
        let nlayers = self.weights.len();
        if params.weights.len() != nlayers || params.biases.len() != nlayers {
            return Err(AdError::Conformance(format!(
                "bound params cover {} layers, stack has {nlayers}",
                params.weights.len()
            )));
        }
        let batch = g.value(x).dims2()?.0;
        let ones = g.constant(Tensor::ones(vec![batch, 1]))?;
        let mut h = x;
        let mut penultimate = x;
        for i in 0..nlayers {
            let z = g.matmul(h, params.weights[i])?;
            let brow = g.matmul(ones, params.biases[i])?;
            let z = g.add(z, brow)?;
            if i + 1 < nlayers {
                h = g.relu(z)?;
            } else {
                penultimate = h;
                h = z;
            }
        }
        Ok((penultimate, h))
    }

    /// Value-level forward mirroring [`Self::forward`] op for op.
    fn forward_values(&self, x: &Tensor<F>) -> AdResult<(Tensor<F>, Tensor<F>)> {
        let batch = x.dims2()?.0;
        let ones = Tensor::ones(vec![batch, 1]);
        let mut h = x.clone();
        let mut penultimate = x.clone();
        let nlayers = self.weights.len();
        for i in 0..nlayers {
            let z = tensor::matmul(&h, &self.weights[i])?;
            let brow = tensor::matmul(&ones, &self.biases[i])?;
            let z = tensor::ew_binary("add", &z, &brow, |a, b| a + b)?;
            if i + 1 < nlayers {
                h = z.map(|v| if v > F::zero() { v } else { F::zero() });
            } else {
                penultimate = h;
                h = z;
            }
        }
        Ok((penultimate, h))
    }

    fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(Tensor::all_finite)
    }
}

/// MLP classifier over flattened images: `3·H·W → hidden… → C`, ReLU
/// activations, He init, zero biases.
#[derive(Clone, Debug)]
pub struct Mlp<F> {
    input_dim: usize,
    hidden: Vec<usize>,
    classes: usize,
    stack: Stack<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        seed: u64,
    ) -> ModelResult<Self>
    where
        StandardNormal: Distribution<F>,
    {
        if input_dim == 0 {
            return Err(ModelError::Config("input_dim must be ≥ 1".into()));
        }
        if classes < 2 {
            return Err(ModelError::Config(format!(
                "classifier needs ≥ 2 classes, got {classes}"
            )));
        }
        if hidden.iter().any(|&w| w == 0) {
            return Err(ModelError::Config("hidden widths must be ≥ 1".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Ok(Self {
            input_dim,
            hidden: hidden.to_vec(),
            classes,
            stack: Stack::init(&dims, seed, false),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// Width of the penultimate activation (the feature vector).
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn param_count(&self) -> usize {
        self.stack.param_count()
    }

    /// Final-layer weight matrix, `feature_dim×C`; column `y` is the weight
    /// vector of class `y`.
    pub fn final_weight(&self) -> &Tensor<F> {
        self.stack.weights.last().expect("≥ 1 layer")
    }

    pub fn layer_tensors(&self) -> impl Iterator<Item = (&Tensor<F>, &Tensor<F>)> {
        self.stack.weights.iter().zip(&self.stack.biases)
    }

    /// Mutable (weight, bias) pairs in layer order, for the optimizer.
    pub fn layer_tensors_mut(&mut self) -> Vec<(&mut Tensor<F>, &mut Tensor<F>)> {
        self.stack
            .weights
            .iter_mut()
            .zip(self.stack.biases.iter_mut())
            .collect()
    }

    /// Replaces parameters wholesale (shapes must match; used by checkpoint
    /// load).
    pub fn set_layer_tensors(&mut self, layers: Vec<(Tensor<F>, Tensor<F>)>) -> ModelResult<()> {
        if layers.len() != self.stack.weights.len() {
            return Err(ModelError::Config(format!(
                "expected {} layers, got {}",
                self.stack.weights.len(),
                layers.len()
            )));
        }
        for (i, (w, b)) in layers.into_iter().enumerate() {
            if w.shape() != self.stack.weights[i].shape() || b.shape() != self.stack.biases[i].shape()
            {
                return Err(ModelError::Config(format!(
                    "layer {i} shape mismatch: {:?}/{:?} vs {:?}/{:?}",
                    w.shape(),
                    b.shape(),
                    self.stack.weights[i].shape(),
                    self.stack.biases[i].shape()
                )));
            }
            if !(w.all_finite() && b.all_finite()) {
                return Err(ModelError::Ad(AdError::Numeric(
                    "non-finite parameter detected".into(),
                )));
            }
            self.stack.weights[i] = w;
            self.stack.biases[i] = b;
        }
        Ok(())
    }

    /// Binds parameters as trainable graph leaves.
    pub fn bind(&self, g: &mut Graph<F>) -> AdResult<BoundParams> {
        self.stack.bind(g, true)
    }

    /// Binds parameters as constants (evaluation, FGSM input gradients).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> AdResult<BoundParams> {
        self.stack.bind(g, false)
    }

    /// Differentiable forward: `x` is batch×(3·H·W); returns
    /// (features batch×F, logits batch×C).
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        params: &BoundParams,
        x: NodeId,
    ) -> AdResult<(NodeId, NodeId)> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.input_dim {
            return Err(AdError::Conformance(format!(
                "input width {d} != classifier input dim {}",
                self.input_dim
            )));
        }
        self.stack.forward(g, params, x)
    }

    /// Value-only forward for evaluation paths that need no gradients.
    pub fn forward_values(&self, x: &Tensor<F>) -> AdResult<(Tensor<F>, Tensor<F>)> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim {
            return Err(AdError::Conformance(format!(
                "input width {d} != classifier input dim {}",
                self.input_dim
            )));
        }
        self.stack.forward_values(x)
    }

    pub fn params_flatten(&self) -> Tensor<F> {
        self.stack.flatten()
    }

    pub fn params_assign(&mut self, flat: &Tensor<F>) -> ModelResult<()> {
        if !flat.all_finite() {
            return Err(ModelError::Ad(AdError::Numeric(
                "non-finite parameter detected".into(),
            )));
        }
        self.stack.assign(flat)
    }

    /// Splits a flat parameter node into graph-connected per-layer params.
    pub fn params_from_flat(&self, g: &mut Graph<F>, flat: NodeId) -> AdResult<BoundParams> {
        self.stack.params_from_flat(g, flat)
    }

    pub fn all_finite(&self) -> bool {
        self.stack.all_finite()
    }
}

/// Two-layer perturbation network: normalized characteristics (width 10) →
/// hidden ReLU → δ ∈ R^C. The output layer is zero-initialized so δ ≡ 0 at
/// the start of training.
#[derive(Clone, Debug)]
pub struct PerturbNet<F> {
    hidden: usize,
    classes: usize,
    stack: Stack<F>,
}

impl<F: Scalar> PerturbNet<F> {
    pub fn init(classes: usize, hidden: usize, seed: u64) -> ModelResult<Self>
    where
        StandardNormal: Distribution<F>,
    {
        if classes < 2 {
            return Err(ModelError::Config(format!(
                "perturbation net needs ≥ 2 classes, got {classes}"
            )));
        }
        if hidden == 0 {
            return Err(ModelError::Config("pnet hidden width must be ≥ 1".into()));
        }
        Ok(Self {
            hidden,
            classes,
            stack: Stack::init(&[CHAR_WIDTH, hidden, classes], seed, true),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.stack.param_count()
    }

    pub fn layer_tensors(&self) -> impl Iterator<Item = (&Tensor<F>, &Tensor<F>)> {
        self.stack.weights.iter().zip(&self.stack.biases)
    }

    pub fn set_layer_tensors(&mut self, layers: Vec<(Tensor<F>, Tensor<F>)>) -> ModelResult<()> {
        if layers.len() != 2 {
            return Err(ModelError::Config(format!(
                "perturbation net has 2 layers, got {}",
                layers.len()
            )));
        }
        for (i, (w, b)) in layers.into_iter().enumerate() {
            if w.shape() != self.stack.weights[i].shape() || b.shape() != self.stack.biases[i].shape()
            {
                return Err(ModelError::Config(format!("pnet layer {i} shape mismatch")));
            }
            self.stack.weights[i] = w;
            self.stack.biases[i] = b;
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>) -> AdResult<BoundParams> {
        self.stack.bind(g, true)
    }

    pub fn bind_frozen(&self, g: &mut Graph<F>) -> AdResult<BoundParams> {
        self.stack.bind(g, false)
    }

    /// Differentiable δ = W2·relu(W1·cv + b1) + b2 for a batch of normalized
    /// characteristic vectors (batch×10).
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        params: &BoundParams,
        cv: NodeId,
    ) -> AdResult<NodeId> {
        let (_, d) = g.value(cv).dims2()?;
        if d != CHAR_WIDTH {
            return Err(AdError::Conformance(format!(
                "characteristic width {d} != {CHAR_WIDTH}"
            )));
        }
        let (_, delta) = self.stack.forward(g, params, cv)?;
        Ok(delta)
    }

    /// Value-only δ for diagnostics.
    pub fn forward_values(&self, cv: &Tensor<F>) -> AdResult<Tensor<F>> {
        let (_, d) = cv.dims2()?;
        if d != CHAR_WIDTH {
            return Err(AdError::Conformance(format!(
                "characteristic width {d} != {CHAR_WIDTH}"
            )));
        }
        let (_, delta) = self.stack.forward_values(cv)?;
        Ok(delta)
    }

    pub fn params_flatten(&self) -> Tensor<F> {
        self.stack.flatten()
    }

    pub fn params_assign(&mut self, flat: &Tensor<F>) -> ModelResult<()> {
        if !flat.all_finite() {
            return Err(ModelError::Ad(AdError::Numeric(
                "non-finite parameter detected".into(),
            )));
        }
        self.stack.assign(flat)
    }

    pub fn params_from_flat(&self, g: &mut Graph<F>, flat: NodeId) -> AdResult<BoundParams> {
        self.stack.params_from_flat(g, flat)
    }

    /// Plain SGD step on Ω given gradients in flatten order (w1, b1, w2, b2).
    pub fn apply_sgd(&mut self, lr: F, grads: &[Tensor<F>]) -> ModelResult<()> {
        if grads.len() != 4 {
            return Err(ModelError::Config(format!(
                "expected 4 gradient tensors, got {}",
                grads.len()
            )));
        }
        let mut gi = grads.iter();
        for i in 0..2 {
            for t in [&mut self.stack.weights[i], &mut self.stack.biases[i]] {
                let gt = gi.next().expect("4 grads");
                if gt.shape() != t.shape() {
                    return Err(ModelError::Config(format!(
                        "gradient shape {:?} != parameter shape {:?}",
                        gt.shape(),
                        t.shape()
                    )));
                }
                let stepped: Vec<F> = t
                    .data()
                    .iter()
                    .zip(gt.data())
                    .map(|(&p, &gv)| p - lr * gv)
                    .collect();
                *t = Tensor::from_vec(t.shape().to_vec(), stepped).expect("same shape");
                if !t.all_finite() {
                    return Err(ModelError::Ad(AdError::Numeric(
                        "non-finite parameter after Ω step".into(),
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.stack.all_finite()
    }
}
