//! Training library for studying and mitigating spurious correlations in
//! classifiers via meta-learned logit perturbations.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensorad`] — a small dense-tensor reverse-mode autodiff engine with
//!   higher-order support (gradients of gradients), enough to differentiate
//!   through one virtual optimizer step and through input gradients.
//! - [`models`] — an MLP classifier backbone and the perturbation network that
//!   maps per-sample training characteristics to logit offsets.
//! - [`synthdata`] — the SpurShapes synthetic image generator plus controlled
//!   bias injection (long-tail class imbalance, label noise) and clean
//!   metadata subset selection.
//! - [`causalaug`] — counterfactual / factual infill augmentation of the
//!   metadata (grey, random, shuffle, tile, mix-rand and FGSM infills).
//! - [`characteristics`] — the ten per-sample training characteristics fed to
//!   the perturbation network, with running class statistics and z-score
//!   normalization.
//! - [`metatrain`] — the bi-level training loop: virtual SGD step, meta update
//!   of the perturbation network through that step, actual classifier step.
//! - [`evalreport`] — accuracy/worst-group metrics, loss-increase diagnostics,
//!   input-gradient saliency maps, and artifact emission.
//! - [`config`], [`checkpoint`], [`pipeline`] — run configuration, binary
//!   checkpoint format, and the end-to-end subcommand implementations used by
//!   the `clp` binary.
//!
//! The numeric core ([`tensorad`], [`models`]) is generic over the scalar
//! type; the pipeline instantiates everything at `f64` via the aliases below.
//! Image pixels are stored as `f32` in containers and promoted on graph entry.

pub mod causalaug;
pub mod characteristics;
pub mod checkpoint;
pub mod config;
pub mod evalreport;
pub mod metatrain;
pub mod models;
pub mod pipeline;
pub mod scalar;
pub mod synthdata;
pub mod tensorad;
pub mod util;

pub use scalar::Scalar;

/// Scalar type used by the training pipeline.
pub type Real = f64;
/// Dense tensor over [`Real`].
pub type Tensor = tensorad::Tensor<Real>;
/// Autodiff graph over [`Real`].
pub type Graph = tensorad::Graph<Real>;
/// Classifier backbone over [`Real`].
pub type Mlp = models::Mlp<Real>;
/// Perturbation network over [`Real`].
pub type PerturbNet = models::PerturbNet<Real>;
