//! Bi-level training loop that learns per-sample logit perturbations.
//!
//! Each iteration runs three coupled steps on one training minibatch:
//!
//! 1. **virtual step** — a plain-SGD update `Ŵ = W − η1·∇_W[CE + saliency]`
//!    built with the graph kept alive, so `Ŵ` remains a differentiable
//!    function of the perturbation network,
//! 2. **meta step** — the perturbation network descends the loss of an
//!    augmented metadata batch evaluated *at* `Ŵ`, with gradient flowing
//!    both through its own outputs on the metadata and through `Ŵ`,
//! 3. **actual step** — the classifier takes a momentum/weight-decay SGD
//!    step on the same minibatch with perturbations recomputed under the
//!    freshly updated network.
//!
//! Perturbations are produced from per-sample characteristic vectors that
//! are extracted as detached host floats and z-scored by a running
//! normalizer; counterfactual metadata views ("this is *not* class y")
//! are scored with the negative log-likelihood of avoiding the label.
//!
//! [`train_erm`] runs the identical loop with a zero perturbation and no
//! meta step. With a zero-output frozen perturbation network the two
//! trajectories agree bit for bit, which doubles as a regression oracle.

use rand::seq::SliceRandom;
use rand::RngExt;
use thiserror::Error;

use crate::characteristics::{
    extract, CharError, CharVector, ClassStats, FeatureNormalizer, CLASS_STATS_BETA,
    NUM_CHARACTERISTICS,
};
use crate::models::{BoundParams, Mlp, ModelError, PerturbNet};
use crate::scalar::{lit, upcast, Scalar};
use crate::synthdata::{DataError, DatasetContainer};
use crate::tensorad::{AdError, Graph, NodeId, Tensor};
use crate::util::substream_rng;

/// Default saliency weight.
pub const DEFAULT_LAMBDA: f64 = 0.6;
/// Probabilities are clipped to this before `log(1 − p)`.
const MAX_AVOID_PROB: f64 = 1.0 - 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("train numeric: {0}")]
    Numeric(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Char(#[from] CharError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Hyperparameters for both the bi-level loop and the ERM baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Classifier step size (virtual and actual steps).
    pub eta1: f64,
    /// Perturbation-network step size.
    pub eta2: f64,
    /// Training minibatch size (epochs drop the trailing partial batch).
    pub batch_n: usize,
    /// Metadata minibatch size (sampled with replacement).
    pub batch_m: usize,
    /// Number of iterations.
    pub iters: usize,
    /// Saliency weight λ.
    pub lambda: f64,
    /// Momentum for the actual classifier step.
    pub momentum: f64,
    /// Weight decay for the actual classifier step.
    pub weight_decay: f64,
    /// Treat the saliency input-gradient as constant in the meta lineage
    /// (cheaper, skips one second-order term; values of every actual update
    /// stay exact).
    pub detach_saliency: bool,
    /// Apply the saliency penalty on training batches (meta batches always
    /// carry it when λ > 0).
    pub saliency_on_train: bool,
    /// Keep the perturbation network fixed (diagnostic; with its zero
    /// initialization this reproduces the ERM trajectory exactly).
    pub freeze_pnet: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta1: 0.05,
            eta2: 0.05,
            batch_n: 32,
            batch_m: 16,
            iters: 200,
            lambda: DEFAULT_LAMBDA,
            momentum: 0.9,
            weight_decay: 1e-4,
            detach_saliency: false,
            saliency_on_train: true,
            freeze_pnet: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if !(self.eta1.is_finite() && self.eta1 > 0.0) {
            return Err(TrainError::Config(format!("eta1 must be > 0, got {}", self.eta1)));
        }
        if !(self.eta2.is_finite() && self.eta2 > 0.0) {
            return Err(TrainError::Config(format!("eta2 must be > 0, got {}", self.eta2)));
        }
        if self.batch_n == 0 || self.batch_m == 0 {
            return Err(TrainError::Config("batch sizes must be ≥ 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(TrainError::Config(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::Config(format!(
                "weight decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One row of the per-iteration log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective value of the actual classifier step (CE + saliency).
    pub train_loss: f64,
    /// Metadata objective value, absent for ERM / frozen runs.
    pub meta_loss: Option<f64>,
}

/// One row of the per-epoch log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed when the epoch closed.
    pub iteration: usize,
    pub mean_train_loss: f64,
    /// Top-1 accuracy on the held-out set, when one was supplied.
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Per-iteration log as CSV (`iter,train_loss,meta_loss`).
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("iter,train_loss,meta_loss\n");
        for s in &self.steps {
            let meta = s.meta_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", s.iteration, s.train_loss, meta));
        }
        out
    }

    /// Per-epoch log as CSV (`epoch,iteration,mean_train_loss,eval_accuracy`).
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,iteration,mean_train_loss,eval_accuracy\n");
        for e in &self.epochs {
            let acc = e.eval_accuracy.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.iteration, e.mean_train_loss, acc
            ));
        }
        out
    }
}

/// Everything the loop carries across iterations.
#[derive(Clone, Debug)]
pub struct TrainState<F: Scalar> {
    pub model: Mlp<F>,
    /// Present for bi-level runs, absent for the ERM baseline.
    pub pnet: Option<PerturbNet<F>>,
    pub stats: ClassStats,
    pub normalizer: FeatureNormalizer,
    pub iteration: usize,
    pub epochs_completed: usize,
}

/// A minibatch in tensor form: inputs, effective labels, counterfactual
/// flags, and per-sample saliency weights `(1−r)/Σ(1−r)` replicated across
/// channels (zero rows where the mask covers everything).
pub struct BatchData<F: Scalar> {
    pub x: Tensor<F>,
    pub labels: Vec<usize>,
    pub cf: Vec<bool>,
    pub sal_weights: Tensor<F>,
}

/// Assembles a minibatch from container rows.
pub fn gather_batch<F: Scalar>(
    ds: &DatasetContainer,
    idxs: &[usize],
) -> TrainResult<BatchData<F>> {
    if idxs.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let b = idxs.len();
    let d = ds.pixel_dim();
    let hw = ds.height() * ds.width();
    let mut x = Vec::with_capacity(b * d);
    let mut labels = Vec::with_capacity(b);
    let mut cf = Vec::with_capacity(b);
    let mut w = Vec::with_capacity(b * d);
    for &i in idxs {
        if i >= ds.len() {
            return Err(TrainError::Config(format!(
                "batch index {i} outside container of {}",
                ds.len()
            )));
        }
        let s = ds.sample(i);
        x.extend(s.pixels.iter().map(|&p| lit::<F>(p as f64)));
        labels.push(s.label as usize);
        cf.push(s.is_counterfactual());
        let denom: f64 = s.mask.iter().map(|&m| 1.0 - m as f64).sum();
        if denom == 0.0 {
            w.extend(std::iter::repeat_n(F::zero(), d));
        } else {
            for _ch in 0..3 {
                w.extend(s.mask.iter().map(|&m| lit::<F>((1.0 - m as f64) / denom)));
            }
        }
        debug_assert_eq!(s.mask.len(), hw);
    }
    Ok(BatchData {
        x: Tensor::from_vec(vec![b, d], x)?,
        labels,
        cf,
        sal_weights: Tensor::from_vec(vec![b, d], w)?,
    })
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean cross-entropy `−log S(logits)_y` via stable log-softmax.
pub fn ce_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: NodeId,
    labels: &[usize],
) -> TrainResult<NodeId> {
    let (b, _) = g.value(logits).dims2()?;
    if labels.len() != b {
        return Err(TrainError::Config(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.row_gather(ls, labels)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, lit::<F>(-1.0 / b as f64))?)
}

/// Mean `−log(1 − S(logits)_y)` against the labels to avoid, with the
/// probability clipped to `1 − 1e-12` so the value stays finite.
pub fn cf_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: NodeId,
    orig_labels: &[usize],
) -> TrainResult<NodeId> {
    let (b, _) = g.value(logits).dims2()?;
    if orig_labels.len() != b {
        return Err(TrainError::Config(format!(
            "{} labels for {b} logit rows",
            orig_labels.len()
        )));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.row_gather(ls, orig_labels)?;
    let p = g.exp(picked)?;
    let pc = g.clamp(p, F::zero(), lit::<F>(MAX_AVOID_PROB))?;
    let one = g.constant(Tensor::ones(vec![b, 1]))?;
    let avoid = g.sub(one, pc)?;
    let lg = g.log(avoid)?;
    let total = g.sum(lg)?;
    Ok(g.scale(total, lit::<F>(-1.0 / b as f64))?)
}

/// Per-row routing: counterfactual rows score `−log(1 − S_y)`, all others
/// plain cross-entropy; the mean is taken over the whole batch.
pub fn mixed_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: NodeId,
    labels: &[usize],
    cf: &[bool],
) -> TrainResult<NodeId> {
    let (b, _) = g.value(logits).dims2()?;
    if labels.len() != b || cf.len() != b {
        return Err(TrainError::Config(format!(
            "labels/flags ({}, {}) for {b} logit rows",
            labels.len(),
            cf.len()
        )));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.row_gather(ls, labels)?;
    let nll = g.scale(picked, lit::<F>(-1.0))?;
    let p = g.exp(picked)?;
    let pc = g.clamp(p, F::zero(), lit::<F>(MAX_AVOID_PROB))?;
    let one = g.constant(Tensor::ones(vec![b, 1]))?;
    let avoid = g.sub(one, pc)?;
    let lg = g.log(avoid)?;
    let avoid_nll = g.scale(lg, lit::<F>(-1.0))?;
    let cf_mask: Vec<F> = cf
        .iter()
        .map(|&c| if c { F::one() } else { F::zero() })
        .collect();
    let ce_mask: Vec<F> = cf
        .iter()
        .map(|&c| if c { F::zero() } else { F::one() })
        .collect();
    let mc = g.constant(Tensor::from_vec(vec![b, 1], cf_mask)?)?;
    let me = g.constant(Tensor::from_vec(vec![b, 1], ce_mask)?)?;
    let ce_part = g.mul(nll, me)?;
    let cf_part = g.mul(avoid_nll, mc)?;
    let both = g.add(ce_part, cf_part)?;
    let total = g.sum(both)?;
    Ok(g.scale(total, lit::<F>(1.0 / b as f64))?)
}

/// Saliency penalty on an already-built forward pass: mean over the batch of
/// `λ·Σ_j (∂S_y/∂x_j)²·w_j` where `w` down-weights in-mask coordinates to
/// zero and normalizes by the background area. `x` must be a differentiable
/// leaf. `gx_create_graph` keeps the input-gradient differentiable so the
/// penalty can itself be differentiated (needed whenever the penalty is part
/// of a loss that gets a backward pass).
pub fn saliency_penalty<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    perturbed_logits: NodeId,
    labels: &[usize],
    weights: &Tensor<F>,
    lambda: f64,
    gx_create_graph: bool,
) -> TrainResult<NodeId> {
    let (b, d) = g.value(x).dims2()?;
    if weights.shape() != [b, d] {
        return Err(TrainError::Config(format!(
            "saliency weights {:?} don't match input {b}×{d}",
            weights.shape()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(TrainError::Config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    if !g.requires_grad(x) {
        return Err(TrainError::Config(
            "saliency needs the input bound as a differentiable leaf".into(),
        ));
    }
    let s = g.softmax(perturbed_logits)?;
    let sy = g.row_gather(s, labels)?;
    let total_sy = g.sum(sy)?;
    let gx = g.backward(total_sy, &[x], gx_create_graph)?[0];
    let sq = g.square(gx)?;
    let wn = g.constant(weights.clone())?;
    let wsq = g.mul(sq, wn)?;
    let col = g.constant(Tensor::ones(vec![d, 1]))?;
    let per_sample = g.matmul(wsq, col)?;
    let summed = g.sum(per_sample)?;
    let mean = g.scale(summed, lit::<F>(1.0 / b as f64))?;
    Ok(g.scale(mean, lit::<F>(lambda))?)
}

/// Standalone saliency penalty that builds its own forward pass (testing and
/// diagnostics; the trainer fuses the penalty with its classification
/// forward).
pub fn saliency_reg<F: Scalar>(
    g: &mut Graph<F>,
    model: &Mlp<F>,
    params: &BoundParams,
    x: &Tensor<F>,
    delta: Option<&Tensor<F>>,
    labels: &[usize],
    weights: &Tensor<F>,
    lambda: f64,
) -> TrainResult<NodeId> {
    let xn = g.leaf(x.clone(), true)?;
    let (_feat, u) = model.forward(g, params, xn)?;
    let pert = match delta {
        Some(d) => {
            let dn = g.constant(d.clone())?;
            g.add(u, dn)?
        }
        None => u,
    };
    saliency_penalty(g, xn, pert, labels, weights, lambda, true)
}

// ---------------------------------------------------------------------------
// characteristic extraction (host side, detached)
// ---------------------------------------------------------------------------

fn host_log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    row.iter().map(|l| l - lse).collect()
}

/// Per-sample (loss, margin) at the observed label: counterfactual rows get
/// the avoid-the-label loss, all others cross-entropy; the margin is the raw
/// `S_y − max_{j≠y} S_j`.
pub(crate) fn loss_and_margin(logits: &[f64], label: usize, counterfactual: bool) -> (f64, f64) {
    let ls = host_log_softmax(logits);
    let sy = ls[label].exp();
    let max_other = ls
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v.exp())
        .fold(f64::NEG_INFINITY, f64::max);
    let loss = if counterfactual {
        -(1.0 - sy.min(MAX_AVOID_PROB)).ln()
    } else {
        -ls[label]
    };
    (loss, sy - max_other)
}

fn tensor_row_f64<F: Scalar>(t: &Tensor<F>, row: usize, cols: usize) -> Vec<f64> {
    t.data()[row * cols..(row + 1) * cols]
        .iter()
        .map(|&v| upcast(v))
        .collect()
}

/// Extracts raw (un-normalized) characteristic vectors plus the
/// (label, loss, margin) observations for the statistics update.
pub(crate) fn raw_characteristics<F: Scalar>(
    logits: &Tensor<F>,
    features: &Tensor<F>,
    final_weight: &Tensor<F>,
    labels: &[usize],
    cf: &[bool],
    stats: &ClassStats,
) -> TrainResult<(Vec<CharVector>, Vec<(usize, f64, f64)>)> {
    let (b, c) = logits.dims2()?;
    let (_, fdim) = features.dims2()?;
    let (wr, wc) = final_weight.dims2()?;
    let wf64 = Tensor::<f64>::from_vec(
        vec![wr, wc],
        final_weight.data().iter().map(|&v| upcast(v)).collect(),
    )?;
    let mut rows = Vec::with_capacity(b);
    let mut obs = Vec::with_capacity(b);
    for i in 0..b {
        let lrow = tensor_row_f64(logits, i, c);
        let frow = tensor_row_f64(features, i, fdim);
        let (loss, margin) = loss_and_margin(&lrow, labels[i], cf[i]);
        rows.push(extract(&lrow, &frow, labels[i], cf[i], loss, &wf64, stats)?);
        obs.push((labels[i], loss, margin));
    }
    Ok((rows, obs))
}

pub(crate) fn cv_tensor<F: Scalar>(rows: &[CharVector]) -> TrainResult<Tensor<F>> {
    let mut data = Vec::with_capacity(rows.len() * NUM_CHARACTERISTICS);
    for r in rows {
        data.extend(r.as_array().iter().map(|&v| lit::<F>(v)));
    }
    Ok(Tensor::from_vec(vec![rows.len(), NUM_CHARACTERISTICS], data)?)
}

// ---------------------------------------------------------------------------
// the three steps
// ---------------------------------------------------------------------------

/// Result of the virtual classifier step.
pub struct VirtualStep {
    /// Graph handles for `Ŵ`, differentiable w.r.t. the perturbation net.
    pub params: BoundParams,
    /// Objective value (CE + saliency) at the current parameters.
    pub objective: f64,
    /// CE value alone.
    pub data_loss: f64,
}

/// Builds `Ŵ = W − η1·∇_W[CE(S(u+δ)) + saliency]` inside `g` with the
/// gradient graph kept alive. `state` is untouched — the step is virtual.
/// With `detach_saliency` the saliency part of the gradient enters `Ŵ` as a
/// detached value (exact numbers, no second-order lineage).
#[allow(clippy::too_many_arguments)]
pub fn inner_virtual_step<F: Scalar>(
    g: &mut Graph<F>,
    model: &Mlp<F>,
    w: &BoundParams,
    pnet: &PerturbNet<F>,
    omega: &BoundParams,
    batch: &BatchData<F>,
    cv: &Tensor<F>,
    cfg: &TrainConfig,
) -> TrainResult<VirtualStep> {
    let use_sal = cfg.lambda > 0.0 && cfg.saliency_on_train;
    let xn = if use_sal {
        g.leaf(batch.x.clone(), true)?
    } else {
        g.constant(batch.x.clone())?
    };
    let cvn = g.constant(cv.clone())?;
    let delta = pnet.forward(g, omega, cvn)?;
    let (_feat, u) = model.forward(g, w, xn)?;
    let pert = g.add(u, delta)?;
    let ce = ce_loss(g, pert, &batch.labels)?;
    let w_nodes = w.nodes();
    let (total, grads) = if use_sal {
        let sal = saliency_penalty(
            g,
            xn,
            pert,
            &batch.labels,
            &batch.sal_weights,
            cfg.lambda,
            true,
        )?;
        let total = g.add(ce, sal)?;
        let grads = if cfg.detach_saliency {
            let gce = g.backward(ce, &w_nodes, true)?;
            let gsal = g.backward(sal, &w_nodes, false)?;
            let mut sums = Vec::with_capacity(gce.len());
            for (&a, &bnode) in gce.iter().zip(&gsal) {
                sums.push(g.add(a, bnode)?);
            }
            sums
        } else {
            g.backward(total, &w_nodes, true)?
        };
        (total, grads)
    } else {
        let grads = g.backward(ce, &w_nodes, true)?;
        (ce, grads)
    };
    for &gn in &grads {
        if !g.value(gn).all_finite() {
            return Err(TrainError::Numeric(
                "non-finite gradient in the virtual classifier step".into(),
            ));
        }
    }
    let eta = lit::<F>(cfg.eta1);
    let mut virtual_nodes = Vec::with_capacity(w_nodes.len());
    for (&wn, &gn) in w_nodes.iter().zip(&grads) {
        let step = g.scale(gn, eta)?;
        virtual_nodes.push(g.sub(wn, step)?);
    }
    Ok(VirtualStep {
        params: BoundParams::from_nodes(&virtual_nodes)?,
        objective: upcast(g.value_scalar(total)?),
        data_loss: upcast(g.value_scalar(ce)?),
    })
}

/// The metadata objective evaluated at the virtual parameters.
pub struct MetaEval<F: Scalar> {
    /// Scalar node of the full objective (routing loss + saliency).
    pub objective: NodeId,
    pub value: f64,
    /// Characteristic vectors actually fed to the perturbation network
    /// (extracted at the virtual parameters unless overridden).
    pub cv: Tensor<F>,
}

/// Builds the metadata objective at `virtual_params`: characteristics are
/// extracted from the virtual forward pass (detached, z-scored without
/// updating the normalizer), perturbations come from the network under
/// `omega`, and rows are routed to CE / avoid-the-label by their
/// counterfactual flag. `cv_override` substitutes frozen characteristic
/// inputs — finite-difference probes use it, since the extraction itself is
/// deliberately outside the gradient.
#[allow(clippy::too_many_arguments)]
pub fn meta_objective<F: Scalar>(
    g: &mut Graph<F>,
    model: &Mlp<F>,
    virtual_params: &BoundParams,
    pnet: &PerturbNet<F>,
    omega: &BoundParams,
    meta: &BatchData<F>,
    stats: &ClassStats,
    normalizer: &FeatureNormalizer,
    cfg: &TrainConfig,
    cv_override: Option<&Tensor<F>>,
) -> TrainResult<MetaEval<F>> {
    let use_sal = cfg.lambda > 0.0;
    let xn = if use_sal {
        g.leaf(meta.x.clone(), true)?
    } else {
        g.constant(meta.x.clone())?
    };
    let (feat, u) = model.forward(g, virtual_params, xn)?;
    let cv: Tensor<F> = match cv_override {
        Some(t) => t.clone(),
        None => {
            let last_w = *virtual_params
                .weights
                .last()
                .expect("classifier has ≥ 1 layer");
            let (rows, _obs) = raw_characteristics(
                g.value(u),
                g.value(feat),
                g.value(last_w),
                &meta.labels,
                &meta.cf,
                stats,
            )?;
            let normed = rows
                .iter()
                .map(|r| normalizer.transform(r))
                .collect::<Result<Vec<_>, _>>()?;
            cv_tensor(&normed)?
        }
    };
    let cvn = g.constant(cv.clone())?;
    let delta = pnet.forward(g, omega, cvn)?;
    let pert = g.add(u, delta)?;
    let routed = mixed_loss(g, pert, &meta.labels, &meta.cf)?;
    let objective = if use_sal {
        let sal = saliency_penalty(
            g,
            xn,
            pert,
            &meta.labels,
            &meta.sal_weights,
            cfg.lambda,
            !cfg.detach_saliency,
        )?;
        g.add(routed, sal)?
    } else {
        routed
    };
    let value = upcast(g.value_scalar(objective)?);
    if !value.is_finite() {
        return Err(TrainError::Numeric(format!(
            "non-finite metadata objective {value}"
        )));
    }
    Ok(MetaEval {
        objective,
        value,
        cv,
    })
}

/// One plain-SGD step of the perturbation network on a built objective.
pub fn meta_update<F: Scalar>(
    g: &mut Graph<F>,
    objective: NodeId,
    omega: &BoundParams,
    pnet: &mut PerturbNet<F>,
    eta2: f64,
) -> TrainResult<()> {
    let handles = omega.nodes();
    let grads = g.backward(objective, &handles, false)?;
    let mut tensors = Vec::with_capacity(grads.len());
    for &gn in &grads {
        let t = g.value(gn);
        if !t.all_finite() {
            return Err(TrainError::Numeric(
                "non-finite meta-gradient for the perturbation network".into(),
            ));
        }
        tensors.push(t.clone());
    }
    pnet.apply_sgd(lit::<F>(eta2), &tensors)?;
    Ok(())
}

/// Momentum/weight-decay SGD step of the classifier on one minibatch with
/// perturbations recomputed under the current (frozen) network; `None`
/// perturbation network means a zero offset (ERM). Returns the objective
/// value. Updates `velocity` in flatten order (w0, b0, w1, b1, …).
pub fn actual_step<F: Scalar>(
    model: &mut Mlp<F>,
    pnet: Option<&PerturbNet<F>>,
    batch: &BatchData<F>,
    cv: Option<&Tensor<F>>,
    velocity: &mut [Tensor<F>],
    cfg: &TrainConfig,
) -> TrainResult<f64> {
    let b = batch.labels.len();
    let mut g = Graph::new();
    let w = model.bind(&mut g)?;
    let use_sal = cfg.lambda > 0.0 && cfg.saliency_on_train;
    let xn = if use_sal {
        g.leaf(batch.x.clone(), true)?
    } else {
        g.constant(batch.x.clone())?
    };
    let delta = match pnet {
        Some(p) => {
            let cv = cv.ok_or_else(|| {
                TrainError::Config("perturbed step needs characteristic vectors".into())
            })?;
            let omega = p.bind_frozen(&mut g)?;
            let cvn = g.constant(cv.clone())?;
            p.forward(&mut g, &omega, cvn)?
        }
        None => g.constant(Tensor::zeros(vec![b, model.classes()]))?,
    };
    let (_feat, u) = model.forward(&mut g, &w, xn)?;
    let pert = g.add(u, delta)?;
    let ce = ce_loss(&mut g, pert, &batch.labels)?;
    let total = if use_sal {
        let sal = saliency_penalty(
            &mut g,
            xn,
            pert,
            &batch.labels,
            &batch.sal_weights,
            cfg.lambda,
            true,
        )?;
        g.add(ce, sal)?
    } else {
        ce
    };
    let w_nodes = w.nodes();
    let grads = g.backward(total, &w_nodes, false)?;
    let mut grad_tensors = Vec::with_capacity(grads.len());
    for &gn in &grads {
        let t = g.value(gn);
        if !t.all_finite() {
            return Err(TrainError::Numeric(
                "non-finite gradient in the actual classifier step".into(),
            ));
        }
        grad_tensors.push(t.clone());
    }
    if velocity.len() != grad_tensors.len() {
        return Err(TrainError::Config(format!(
            "velocity buffers ({}) don't match parameter tensors ({})",
            velocity.len(),
            grad_tensors.len()
        )));
    }
    let eta = lit::<F>(cfg.eta1);
    let mu = lit::<F>(cfg.momentum);
    let wd = lit::<F>(cfg.weight_decay);
    let value = upcast(g.value_scalar(total)?);
    for (li, (wt, bt)) in model.layer_tensors_mut().into_iter().enumerate() {
        sgd_update(wt, &grad_tensors[2 * li], &mut velocity[2 * li], eta, mu, wd);
        sgd_update(
            bt,
            &grad_tensors[2 * li + 1],
            &mut velocity[2 * li + 1],
            eta,
            mu,
            wd,
        );
    }
    Ok(value)
}

fn sgd_update<F: Scalar>(param: &mut Tensor<F>, grad: &Tensor<F>, vel: &mut Tensor<F>, eta: F, mu: F, wd: F) {
    for ((p, &gv), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(vel.data_mut().iter_mut())
    {
        let g = gv + wd * *p;
        *v = mu * *v + g;
        *p = *p - eta * *v;
    }
}

// ---------------------------------------------------------------------------
// the loop
// ---------------------------------------------------------------------------

/// Bi-level training: per iteration, virtual step → meta step on an
/// augmented-metadata batch → actual step with the updated perturbations.
/// `meta_ds` must already contain the augmented views. Deterministic given
/// the config seed.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    model: Mlp<F>,
    pnet: PerturbNet<F>,
    train_ds: &DatasetContainer,
    meta_ds: &DatasetContainer,
    eval_ds: Option<&DatasetContainer>,
) -> TrainResult<(TrainState<F>, TrainHistory)> {
    run_loop(cfg, model, Some(pnet), Some(meta_ds), train_ds, eval_ds)
}

/// ERM baseline: identical loop with a zero perturbation and no meta step.
pub fn train_erm<F: Scalar>(
    cfg: &TrainConfig,
    model: Mlp<F>,
    train_ds: &DatasetContainer,
    eval_ds: Option<&DatasetContainer>,
) -> TrainResult<(TrainState<F>, TrainHistory)> {
    run_loop(cfg, model, None, None, train_ds, eval_ds)
}

fn run_loop<F: Scalar>(
    cfg: &TrainConfig,
    mut model: Mlp<F>,
    mut pnet: Option<PerturbNet<F>>,
    meta_ds: Option<&DatasetContainer>,
    train_ds: &DatasetContainer,
    eval_ds: Option<&DatasetContainer>,
) -> TrainResult<(TrainState<F>, TrainHistory)> {
    cfg.validate()?;
    check_container(train_ds, &model, "training set")?;
    if cfg.batch_n > train_ds.len() {
        return Err(TrainError::Config(format!(
            "batch size {} exceeds the training set ({} samples)",
            cfg.batch_n,
            train_ds.len()
        )));
    }
    if let Some(md) = meta_ds {
        check_container(md, &model, "metadata set")?;
    }
    if let Some(p) = &pnet {
        if p.classes() != model.classes() {
            return Err(TrainError::Config(format!(
                "perturbation net emits {} classes, classifier has {}",
                p.classes(),
                model.classes()
            )));
        }
    }
    if let Some(ev) = eval_ds {
        check_container(ev, &model, "evaluation set")?;
    }

    let mut stats = ClassStats::new(train_ds.class_counts(), CLASS_STATS_BETA)?;
    let mut normalizer = FeatureNormalizer::standard();
    let mut batch_rng = substream_rng(cfg.seed, 1);
    let mut meta_rng = substream_rng(cfg.seed, 2);
    let mut velocity: Vec<Tensor<F>> = model
        .layer_tensors()
        .flat_map(|(w, b)| {
            [
                Tensor::zeros(w.shape().to_vec()),
                Tensor::zeros(b.shape().to_vec()),
            ]
        })
        .collect();
    let mut history = TrainHistory::default();
    let iters_per_epoch = train_ds.len() / cfg.batch_n;
    let mut perm: Vec<usize> = (0..train_ds.len()).collect();

    if cfg.iters > 0 {
        warmup(&model, train_ds, cfg.batch_n, &mut stats, &mut normalizer)?;
    }

    let mut epoch_loss = 0.0;
    let mut epoch_steps = 0usize;
    for t in 0..cfg.iters {
        if t % iters_per_epoch == 0 {
            perm.shuffle(&mut batch_rng);
        }
        let start = (t % iters_per_epoch) * cfg.batch_n;
        let idxs = &perm[start..start + cfg.batch_n];
        let batch: BatchData<F> = gather_batch(train_ds, idxs)?;

        // characteristics at the current parameters; streaming normalization
        let (feat_v, logit_v) = model.forward_values(&batch.x)?;
        let (raw, obs) = raw_characteristics(
            &logit_v,
            &feat_v,
            model.final_weight(),
            &batch.labels,
            &batch.cf,
            &stats,
        )
        .map_err(|e| at_iteration(t, e))?;
        let normed: Vec<CharVector> = raw.iter().map(|r| normalizer.normalize(r)).collect();
        let cv = cv_tensor::<F>(&normed)?;

        let mut meta_loss = None;
        if !cfg.freeze_pnet {
            if let (Some(p), Some(md)) = (pnet.as_mut(), meta_ds) {
                let mut g = Graph::new();
                let w = model.bind(&mut g)?;
                let omega = p.bind(&mut g)?;
                let vs = inner_virtual_step(&mut g, &model, &w, p, &omega, &batch, &cv, cfg)
                    .map_err(|e| at_iteration(t, e))?;
                let midx: Vec<usize> = (0..cfg.batch_m)
                    .map(|_| meta_rng.random_range(0..md.len()))
                    .collect();
                let meta_batch: BatchData<F> = gather_batch(md, &midx)?;
                let me = meta_objective(
                    &mut g,
                    &model,
                    &vs.params,
                    p,
                    &omega,
                    &meta_batch,
                    &stats,
                    &normalizer,
                    cfg,
                    None,
                )
                .map_err(|e| at_iteration(t, e))?;
                meta_update(&mut g, me.objective, &omega, p, cfg.eta2)
                    .map_err(|e| at_iteration(t, e))?;
                meta_loss = Some(me.value);
            }
        }

        let train_loss = actual_step(
            &mut model,
            pnet.as_ref(),
            &batch,
            Some(&cv),
            &mut velocity,
            cfg,
        )
        .map_err(|e| at_iteration(t, e))?;
        stats.update(&obs)?;

        history.steps.push(IterationRecord {
            iteration: t,
            train_loss,
            meta_loss,
        });
        epoch_loss += train_loss;
        epoch_steps += 1;
        if (t + 1) % iters_per_epoch == 0 {
            let epoch = (t + 1) / iters_per_epoch;
            let eval_accuracy = match eval_ds {
                Some(ev) => Some(top1_accuracy(&model, ev)?),
                None => None,
            };
            history.epochs.push(EpochRecord {
                epoch,
                iteration: t + 1,
                mean_train_loss: epoch_loss / epoch_steps as f64,
                eval_accuracy,
            });
            epoch_loss = 0.0;
            epoch_steps = 0;
        }
    }

    Ok((
        TrainState {
            model,
            pnet,
            stats,
            normalizer,
            iteration: cfg.iters,
            epochs_completed: cfg.iters / iters_per_epoch,
        },
        history,
    ))
}

fn at_iteration(t: usize, e: TrainError) -> TrainError {
    match e {
        TrainError::Numeric(msg) => TrainError::Numeric(format!("iteration {t}: {msg}")),
        other => other,
    }
}

fn check_container<F: Scalar>(
    ds: &DatasetContainer,
    model: &Mlp<F>,
    what: &str,
) -> TrainResult<()> {
    if ds.is_empty() {
        return Err(TrainError::Config(format!("{what} is empty")));
    }
    if ds.pixel_dim() != model.input_dim() {
        return Err(TrainError::Config(format!(
            "{what} pixel dim {} != classifier input {}",
            ds.pixel_dim(),
            model.input_dim()
        )));
    }
    if ds.classes() != model.classes() {
        return Err(TrainError::Config(format!(
            "{what} has {} classes, classifier {}",
            ds.classes(),
            model.classes()
        )));
    }
    Ok(())
}

/// One sequential pass over the training set at the initial parameters: the
/// class statistics see every class and the normalizer sees a full sweep of
/// raw characteristic vectors, so the first real iteration starts from
/// initialized running state.
fn warmup<F: Scalar>(
    model: &Mlp<F>,
    ds: &DatasetContainer,
    chunk: usize,
    stats: &mut ClassStats,
    normalizer: &mut FeatureNormalizer,
) -> TrainResult<()> {
    let mut i = 0;
    while i < ds.len() {
        let end = (i + chunk).min(ds.len());
        let idxs: Vec<usize> = (i..end).collect();
        let batch: BatchData<F> = gather_batch(ds, &idxs)?;
        let (feat_v, logit_v) = model.forward_values(&batch.x)?;
        let (_, c) = logit_v.dims2()?;
        let obs: Vec<(usize, f64, f64)> = (0..batch.labels.len())
            .map(|r| {
                let lrow = tensor_row_f64(&logit_v, r, c);
                let (loss, margin) = loss_and_margin(&lrow, batch.labels[r], batch.cf[r]);
                (batch.labels[r], loss, margin)
            })
            .collect();
        stats.update(&obs)?;
        let (raw, _) = raw_characteristics(
            &logit_v,
            &feat_v,
            model.final_weight(),
            &batch.labels,
            &batch.cf,
            stats,
        )?;
        for r in &raw {
            normalizer.update(r);
        }
        i = end;
    }
    Ok(())
}

/// Top-1 accuracy against original labels, lowest index winning ties.
fn top1_accuracy<F: Scalar>(model: &Mlp<F>, ds: &DatasetContainer) -> TrainResult<f64> {
    let mut correct = 0usize;
    let mut i = 0;
    while i < ds.len() {
        let end = (i + 256).min(ds.len());
        let idxs: Vec<usize> = (i..end).collect();
        let batch: BatchData<F> = gather_batch(ds, &idxs)?;
        let (_, logits) = model.forward_values(&batch.x)?;
        let (b, c) = logits.dims2()?;
        for r in 0..b {
            let row = &logits.data()[r * c..(r + 1) * c];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == ds.sample(idxs[r]).orig_label as usize {
                correct += 1;
            }
        }
        i = end;
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{synth_spurshapes, SampleRecord, FLAG_COUNTERFACTUAL};

    type G = Graph<f64>;

    fn logits_node(g: &mut G, rows: &[&[f64]]) -> NodeId {
        let b = rows.len();
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.leaf(Tensor::from_vec(vec![b, c], data).unwrap(), true)
            .unwrap()
    }

    #[test]
    fn ce_loss_oracles() {
        let mut g = G::new();
        let uniform = logits_node(&mut g, &[&[0.3, 0.3, 0.3, 0.3]]);
        let l = ce_loss(&mut g, uniform, &[2]).unwrap();
        assert!((g.value_scalar(l).unwrap() - 4f64.ln()).abs() < 1e-12);

        let skewed = logits_node(&mut g, &[&[2.0, 1.0, 0.0]]);
        let l = ce_loss(&mut g, skewed, &[0]).unwrap();
        assert!((g.value_scalar(l).unwrap() - 0.407605964444).abs() < 1e-9);

        let confident = logits_node(&mut g, &[&[40.0, 0.0, 0.0]]);
        let l = ce_loss(&mut g, confident, &[0]).unwrap();
        assert!(g.value_scalar(l).unwrap() < 1e-6);
    }

    #[test]
    fn cf_loss_oracles() {
        let mut g = G::new();
        // S_y ≈ 0: the model already avoids the label
        let avoided = logits_node(&mut g, &[&[0.0, 60.0]]);
        let l = cf_loss(&mut g, avoided, &[0]).unwrap();
        assert!(g.value_scalar(l).unwrap().abs() < 1e-12);

        // S_y = 0.5 exactly
        let half = logits_node(&mut g, &[&[0.7, 0.7]]);
        let l = cf_loss(&mut g, half, &[0]).unwrap();
        assert!((g.value_scalar(l).unwrap() - 2f64.ln()).abs() < 1e-12);

        // S_y → 1: clipped, large but finite (−ln 1e-12)
        let sure = logits_node(&mut g, &[&[800.0, 0.0]]);
        let l = cf_loss(&mut g, sure, &[0]).unwrap();
        let v = g.value_scalar(l).unwrap();
        assert!(v.is_finite());
        assert!((v - 27.631021115928547).abs() < 1e-3, "clip landed at {v}");
    }

    #[test]
    fn mixed_loss_routes_by_flag() {
        let rows: &[&[f64]] = &[&[1.2, -0.3, 0.4], &[0.1, 0.9, -0.5]];
        let labels = [0usize, 1];

        let mut g = G::new();
        let n = logits_node(&mut g, rows);
        let all_ce = mixed_loss(&mut g, n, &labels, &[false, false]).unwrap();
        let plain = ce_loss(&mut g, n, &labels).unwrap();
        assert_eq!(
            g.value_scalar(all_ce).unwrap(),
            g.value_scalar(plain).unwrap()
        );

        let all_cf = mixed_loss(&mut g, n, &labels, &[true, true]).unwrap();
        let avoid = cf_loss(&mut g, n, &labels).unwrap();
        assert_eq!(
            g.value_scalar(all_cf).unwrap(),
            g.value_scalar(avoid).unwrap()
        );

        // one of each: mean of the two single-row values
        let half = mixed_loss(&mut g, n, &labels, &[false, true]).unwrap();
        let row0 = logits_node(&mut g, &[rows[0]]);
        let row1 = logits_node(&mut g, &[rows[1]]);
        let ce0 = ce_loss(&mut g, row0, &[0]).unwrap();
        let cf1 = cf_loss(&mut g, row1, &[1]).unwrap();
        let want =
            0.5 * (g.value_scalar(ce0).unwrap() + g.value_scalar(cf1).unwrap());
        assert!((g.value_scalar(half).unwrap() - want).abs() < 1e-12);
    }

    fn linear_model(w: &[f64], input_dim: usize, classes: usize) -> Mlp<f64> {
        let mut m = Mlp::init(input_dim, &[], classes, 3).unwrap();
        let wt = Tensor::from_vec(vec![input_dim, classes], w.to_vec()).unwrap();
        let bt = Tensor::zeros(vec![1, classes]);
        m.set_layer_tensors(vec![(wt, bt)]).unwrap();
        m
    }

    #[test]
    fn saliency_matches_linear_closed_form() {
        // u = x·W with W 4×3; penalty = λ·mean_i Σ_j (∂S_{y_i}/∂x_j)²·w_ij,
        // and for the linear map ∂S_y/∂x_j = S_y (W_jy − Σ_k S_k W_jk).
        let w = [
            0.5, -0.2, 0.1, //
            0.3, 0.4, -0.6, //
            -0.1, 0.2, 0.7, //
            0.8, -0.5, 0.05,
        ];
        let model = linear_model(&w, 4, 3);
        let x = Tensor::from_vec(
            vec![2, 4],
            vec![0.2, -0.4, 0.6, 0.1, -0.3, 0.5, 0.0, 0.9],
        )
        .unwrap();
        let labels = [1usize, 2];
        let weights = Tensor::from_vec(
            vec![2, 4],
            vec![0.5, 0.0, 0.5, 0.0, 0.25, 0.25, 0.25, 0.25],
        )
        .unwrap();
        let lambda = 0.7;

        let mut g = G::new();
        let params = model.bind_frozen(&mut g).unwrap();
        let pen =
            saliency_reg(&mut g, &model, &params, &x, None, &labels, &weights, lambda).unwrap();
        let got = g.value_scalar(pen).unwrap();

        let mut want = 0.0;
        for i in 0..2 {
            let xi = &x.data()[i * 4..(i + 1) * 4];
            let y = labels[i];
            let mut u = [0.0f64; 3];
            for k in 0..3 {
                u[k] = (0..4).map(|j| xi[j] * w[j * 3 + k]).sum();
            }
            let mx = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = u.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let s: Vec<f64> = exps.iter().map(|e| e / z).collect();
            let mut acc = 0.0;
            for j in 0..4 {
                let avg: f64 = (0..3).map(|k| s[k] * w[j * 3 + k]).sum();
                let grad = s[y] * (w[j * 3 + y] - avg);
                acc += grad * grad * upcast(weights.get2(i, j));
            }
            want += acc;
        }
        want = lambda * want / 2.0;
        assert!(
            (got - want).abs() <= 1e-6 * want.abs().max(1.0),
            "got {got}, want {want}"
        );
    }

    #[test]
    fn saliency_degenerate_cases() {
        let model = linear_model(&[0.4, -0.3, 0.2, 0.6], 2, 2);
        let x = Tensor::from_vec(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let weights = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let mut g = G::new();
        let params = model.bind_frozen(&mut g).unwrap();
        let zero =
            saliency_reg(&mut g, &model, &params, &x, None, &[0], &weights, 0.0).unwrap();
        assert_eq!(g.value_scalar(zero).unwrap(), 0.0);

        // all-ones mask ⇒ zero weight row ⇒ zero penalty
        let blanked = Tensor::zeros(vec![1, 2]);
        let pen =
            saliency_reg(&mut g, &model, &params, &x, None, &[0], &blanked, 0.9).unwrap();
        assert_eq!(g.value_scalar(pen).unwrap(), 0.0);
    }

    /// A small labeled container with deterministic content.
    fn toy_container(classes: u16, n_per_class: usize) -> DatasetContainer {
        synth_spurshapes(classes as usize, 2, 16, 16, n_per_class, 0.5, 11).unwrap()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            eta1: 0.05,
            eta2: 0.05,
            batch_n: 4,
            batch_m: 4,
            iters: 6,
            lambda: 0.4,
            momentum: 0.9,
            weight_decay: 1e-4,
            detach_saliency: false,
            saliency_on_train: true,
            freeze_pnet: false,
            seed: 21,
        }
    }

    #[test]
    fn virtual_step_zero_rate_keeps_parameters() {
        let ds = toy_container(2, 4);
        let model = Mlp::<f64>::init(ds.pixel_dim(), &[4], 2, 5).unwrap();
        let pnet = PerturbNet::<f64>::init(2, 4, 6).unwrap();
        let batch = gather_batch::<f64>(&ds, &[0, 1, 4, 5]).unwrap();
        let cv = Tensor::zeros(vec![4, NUM_CHARACTERISTICS]);
        let mut cfg = toy_cfg();
        cfg.eta1 = 0.0; // op-level probe of the zero-step limit

        let mut g = G::new();
        let w = model.bind(&mut g).unwrap();
        let omega = pnet.bind(&mut g).unwrap();
        let vs = inner_virtual_step(&mut g, &model, &w, &pnet, &omega, &batch, &cv, &cfg).unwrap();
        for (&vn, &wn) in vs.params.nodes().iter().zip(w.nodes().iter()) {
            assert_eq!(g.value(vn).data(), g.value(wn).data());
        }
    }

    #[test]
    fn zero_output_net_reproduces_plain_virtual_step() {
        let ds = toy_container(2, 4);
        let model = Mlp::<f64>::init(ds.pixel_dim(), &[4], 2, 5).unwrap();
        let pnet = PerturbNet::<f64>::init(2, 8, 6).unwrap(); // zero output layer
        let batch = gather_batch::<f64>(&ds, &[0, 2, 4, 6]).unwrap();
        let cv = Tensor::from_vec(
            vec![4, NUM_CHARACTERISTICS],
            (0..4 * NUM_CHARACTERISTICS)
                .map(|i| (i % 7) as f64 / 7.0)
                .collect(),
        )
        .unwrap();
        let cfg = toy_cfg();

        let mut g = G::new();
        let w = model.bind(&mut g).unwrap();
        let omega = pnet.bind(&mut g).unwrap();
        let vs = inner_virtual_step(&mut g, &model, &w, &pnet, &omega, &batch, &cv, &cfg).unwrap();

        // reference: same step with the perturbation literally absent
        let mut g2 = G::new();
        let w2 = model.bind(&mut g2).unwrap();
        let xn = g2.leaf(batch.x.clone(), true).unwrap();
        let (_f, u) = model.forward(&mut g2, &w2, xn).unwrap();
        let zero = g2.constant(Tensor::zeros(vec![4, 2])).unwrap();
        let pert = g2.add(u, zero).unwrap();
        let ce = ce_loss(&mut g2, pert, &batch.labels).unwrap();
        let sal = saliency_penalty(
            &mut g2,
            xn,
            pert,
            &batch.labels,
            &batch.sal_weights,
            cfg.lambda,
            true,
        )
        .unwrap();
        let total = g2.add(ce, sal).unwrap();
        let grads = g2.backward(total, &w2.nodes(), true).unwrap();
        for ((&vn, &wn), &gn) in vs
            .params
            .nodes()
            .iter()
            .zip(w2.nodes().iter())
            .zip(grads.iter())
        {
            let step = g2.scale(gn, cfg.eta1).unwrap();
            let want = g2.sub(wn, step).unwrap();
            assert_eq!(g.value(vn).data(), g2.value(want).data());
        }
    }

    #[test]
    fn actual_step_matches_hand_sgd() {
        // linear 1→2 classifier, one sample, λ = 0, no momentum/decay:
        // ∂CE/∂w0 = (S_0 − 1)·x, ∂CE/∂w1 = S_1·x, biases likewise.
        // x0 must be exactly representable in f32 (container pixel storage)
        let (a, b, x0) = (0.3f64, -0.2f64, 0.75f64);
        let pixels = vec![x0 as f32; 3]; // 3 channels of a 1×1 image
        let sample = SampleRecord {
            pixels,
            mask: vec![1],
            label: 0,
            orig_label: 0,
            group: 0,
            flags: 0,
        };
        let ds = DatasetContainer::new(2, 1, 1, vec![sample], "toy".into()).unwrap();
        // input dim is 3 (channels); collapse to one effective weight per
        // class by zeroing two rows.
        let w = vec![a, b, 0.0, 0.0, 0.0, 0.0];
        let mut model = linear_model(&w, 3, 2);

        let batch = gather_batch::<f64>(&ds, &[0]).unwrap();
        let mut velocity = vec![Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![1, 2])];
        let cfg = TrainConfig {
            eta1: 0.1,
            lambda: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
            ..toy_cfg()
        };
        let loss = actual_step(&mut model, None, &batch, None, &mut velocity, &cfg).unwrap();

        let u0 = a * x0;
        let u1 = b * x0;
        let z = (u0).exp() + (u1).exp();
        let s0 = u0.exp() / z;
        let s1 = u1.exp() / z;
        assert!((loss + s0.ln()).abs() < 1e-12);
        let updated = model.params_flatten();
        let grads_w = [(s0 - 1.0) * x0, s1 * x0];
        assert!((upcast(updated.data()[0]) - (a - 0.1 * grads_w[0])).abs() < 1e-12);
        assert!((upcast(updated.data()[1]) - (b - 0.1 * grads_w[1])).abs() < 1e-12);
        // bias gradients: (S_0 − 1) and S_1
        let bias = &updated.data()[6..8];
        assert!((upcast(bias[0]) - (0.0 - 0.1 * (s0 - 1.0))).abs() < 1e-12);
        assert!((upcast(bias[1]) - (0.0 - 0.1 * s1)).abs() < 1e-12);
    }

    #[test]
    fn meta_update_zero_rate_keeps_network() {
        let ds = toy_container(2, 4);
        let model = Mlp::<f64>::init(ds.pixel_dim(), &[4], 2, 5).unwrap();
        let mut pnet = PerturbNet::<f64>::init(2, 4, 6).unwrap();
        let before = pnet.params_flatten();
        let batch = gather_batch::<f64>(&ds, &[0, 1, 4, 5]).unwrap();
        let cv = Tensor::zeros(vec![4, NUM_CHARACTERISTICS]);
        let cfg = toy_cfg();

        let mut stats = ClassStats::new(ds.class_counts(), CLASS_STATS_BETA).unwrap();
        stats
            .update(&[(0, 0.5, 0.1), (1, 0.4, 0.2)])
            .unwrap();
        let mut normalizer = FeatureNormalizer::standard();
        normalizer.update(&CharVector::from_array([0.5; NUM_CHARACTERISTICS]));

        let mut g = G::new();
        let w = model.bind(&mut g).unwrap();
        let omega = pnet.bind(&mut g).unwrap();
        let vs = inner_virtual_step(&mut g, &model, &w, &pnet, &omega, &batch, &cv, &cfg).unwrap();
        let me = meta_objective(
            &mut g,
            &model,
            &vs.params,
            &pnet,
            &omega,
            &batch,
            &stats,
            &normalizer,
            &cfg,
            None,
        )
        .unwrap();
        meta_update(&mut g, me.objective, &omega, &mut pnet, 0.0).unwrap();
        assert_eq!(pnet.params_flatten().data(), before.data());
    }

    #[test]
    fn training_is_deterministic_and_erm_equivalent() {
        let ds = toy_container(2, 8);
        let meta = toy_container(2, 4);
        let cfg = toy_cfg();
        let mk_model = || Mlp::<f64>::init(ds.pixel_dim(), &[4], 2, 5).unwrap();
        let mk_pnet = || PerturbNet::<f64>::init(2, 4, 6).unwrap();

        let (s1, h1) = train(&cfg, mk_model(), mk_pnet(), &ds, &meta, None).unwrap();
        let (s2, h2) = train(&cfg, mk_model(), mk_pnet(), &ds, &meta, None).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(
            s1.model.params_flatten().data(),
            s2.model.params_flatten().data()
        );

        // zero-output frozen net ≡ ERM, bit for bit
        let frozen_cfg = TrainConfig {
            freeze_pnet: true,
            ..cfg.clone()
        };
        let (sf, hf) = train(&frozen_cfg, mk_model(), mk_pnet(), &ds, &meta, None).unwrap();
        let (se, he) = train_erm(&cfg, mk_model(), &ds, None).unwrap();
        assert_eq!(
            sf.model.params_flatten().data(),
            se.model.params_flatten().data()
        );
        assert_eq!(hf.steps.len(), he.steps.len());
        for (a, b) in hf.steps.iter().zip(he.steps.iter()) {
            assert_eq!(a.train_loss, b.train_loss);
        }
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let ds = toy_container(2, 4);
        let model = Mlp::<f64>::init(ds.pixel_dim(), &[4], 2, 5).unwrap();
        let before = model.params_flatten();
        let cfg = TrainConfig {
            iters: 0,
            ..toy_cfg()
        };
        let (state, history) = train_erm(&cfg, model, &ds, None).unwrap();
        assert_eq!(state.model.params_flatten().data(), before.data());
        assert!(history.steps.is_empty());
        assert!(history.epochs.is_empty());
    }

    #[test]
    fn erm_loss_decreases_on_separable_toy() {
        let ds = toy_container(2, 10);
        let model = Mlp::<f64>::init(ds.pixel_dim(), &[8], 2, 5).unwrap();
        let cfg = TrainConfig {
            eta1: 0.01, // safely below 2/L for these pixel statistics
            iters: 20,
            batch_n: 20, // full-batch for a clean descent signal
            lambda: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
            ..toy_cfg()
        };
        let (_, history) = train_erm(&cfg, model, &ds, None).unwrap();
        let first = history.steps.first().unwrap().train_loss;
        let last = history.steps.last().unwrap().train_loss;
        assert!(
            last < first,
            "full-batch loss should fall: {first} → {last}"
        );
        for pair in history.steps.windows(2).take(10) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss + 1e-9,
                "early descent violated: {} → {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
    }

    #[test]
    fn saliency_shrinks_background_weights() {
        // 1×2 "images": position 0 causal (mask 1), position 1 background.
        // Class signal lives in position 0; position 1 carries a correlated
        // nuisance value. With λ > 0 the background columns of the linear
        // classifier must end up strictly smaller in ℓ₂ norm.
        let mut samples = Vec::new();
        for k in 0..2u16 {
            for i in 0..8 {
                let causal = if k == 0 { 0.9 } else { 0.1 };
                let nuis = if k == 0 { 0.8 } else { 0.2 };
                let jitter = (i as f32) * 0.01;
                samples.push(SampleRecord {
                    pixels: vec![
                        causal + jitter,
                        nuis,
                        causal,
                        nuis + jitter,
                        causal - jitter,
                        nuis,
                    ],
                    mask: vec![1, 0],
                    label: k,
                    orig_label: k,
                    group: k,
                    flags: 0,
                });
            }
        }
        let ds = DatasetContainer::new(2, 1, 2, samples, "toy".into()).unwrap();
        let run = |lambda: f64| {
            let model = Mlp::<f64>::init(6, &[], 2, 9).unwrap();
            let cfg = TrainConfig {
                iters: 40,
                batch_n: 8,
                lambda,
                momentum: 0.0,
                weight_decay: 0.0,
                ..toy_cfg()
            };
            let (state, _) = train_erm(&cfg, model, &ds, None).unwrap();
            let w = state.model.params_flatten();
            // background coordinates: position 1 in each channel → rows 1,3,5
            let mut norm = 0.0f64;
            for row in [1usize, 3, 5] {
                for cidx in 0..2 {
                    let v = upcast(w.data()[row * 2 + cidx]);
                    norm += v * v;
                }
            }
            norm.sqrt()
        };
        let plain = run(0.0);
        let reg = run(0.8);
        assert!(
            reg < plain,
            "background norm should shrink: λ=0 → {plain}, λ=0.8 → {reg}"
        );
    }

    #[test]
    fn counterfactual_meta_rows_are_routed() {
        // assemble a metadata container with an explicit counterfactual row
        let base = toy_container(2, 4);
        let mut samples: Vec<SampleRecord> = base.samples().to_vec();
        let mut cf = samples[0].clone();
        cf.flags |= FLAG_COUNTERFACTUAL;
        samples.push(cf);
        let meta = DatasetContainer::new(2, 16, 16, samples, "meta".into()).unwrap();
        let batch = gather_batch::<f64>(&meta, &[0, meta.len() - 1]).unwrap();
        assert_eq!(batch.cf, vec![false, true]);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = toy_cfg();
        cfg.eta1 = 0.0;
        assert!(cfg.validate().is_err());
        cfg = toy_cfg();
        cfg.lambda = -0.1;
        assert!(cfg.validate().is_err());
        cfg = toy_cfg();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg = toy_cfg();
        cfg.batch_m = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_emission_is_stable() {
        let history = TrainHistory {
            steps: vec![IterationRecord {
                iteration: 0,
                train_loss: 1.5,
                meta_loss: Some(0.25),
            }],
            epochs: vec![EpochRecord {
                epoch: 1,
                iteration: 4,
                mean_train_loss: 1.25,
                eval_accuracy: None,
            }],
        };
        assert_eq!(
            history.steps_csv(),
            "iter,train_loss,meta_loss\n0,1.5,0.25\n"
        );
        assert_eq!(
            history.epochs_csv(),
            "epoch,iteration,mean_train_loss,eval_accuracy\n1,4,1.25,\n"
        );
    }
}
