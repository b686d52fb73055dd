//! Counterfactual and factual augmentation of the metadata.
//!
//! Each sample's causal mask r splits the image into foreground (r = 1) and
//! background (r = 0). A counterfactual view replaces the foreground with an
//! infill value, `(1−r)⊙x + r⊙x̂`, and is labeled "not the original class"
//! (signaled by a flag bit; the loss layer interprets it). A factual view
//! replaces the background instead, `r⊙x + (1−r)⊙x̂`, and keeps the label.
//! Blending selects per pixel by the mask bit, so the two views of the same
//! (x, x̂) pair sum to x + x̂ exactly.
//!
//! Infill generators: constant grey, low-frequency uniform blocks plus
//! Gaussian pixel noise, an in-region pixel shuffle, background-strip tiling,
//! a different-class donor's tiled-out background, and an FGSM step under a
//! frozen classifier snapshot. Augmentation happens once per run on the
//! metadata only; the training set is never augmented.

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::models::Mlp;
use crate::scalar::{lit, Scalar};
use crate::synthdata::{
    DataError, DatasetContainer, SampleRecord, FLAG_COUNTERFACTUAL, FLAG_FACTUAL,
};
use crate::tensorad::{AdError, Graph, Tensor};
use crate::util;

/// Block side of the low-frequency base field used by the random infill.
const RANDOM_BLOCK: usize = 4;
/// Gaussian pixel-noise std dev of the random infill.
const RANDOM_SIGMA: f32 = 0.2;
/// Default FGSM ℓ∞ step.
pub const DEFAULT_EPSILON: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AugError {
    #[error("augment config: {0}")]
    Config(String),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type AugResult<T> = Result<T, AugError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugMode {
    Counterfactual,
    Factual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfillMethod {
    Grey,
    Random,
    Shuffle,
    Tile,
    MixRand,
    Fgsm,
}

impl InfillMethod {
    /// Which modes a generator may serve: grey/tile erase foregrounds
    /// (counterfactual only), mix_rand/fgsm build backgrounds (factual only),
    /// random/shuffle work for both.
    pub fn valid_for(self, mode: AugMode) -> bool {
        match self {
            InfillMethod::Grey | InfillMethod::Tile => mode == AugMode::Counterfactual,
            InfillMethod::MixRand | InfillMethod::Fgsm => mode == AugMode::Factual,
            InfillMethod::Random | InfillMethod::Shuffle => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InfillMethod::Grey => "grey",
            InfillMethod::Random => "random",
            InfillMethod::Shuffle => "shuffle",
            InfillMethod::Tile => "tile",
            InfillMethod::MixRand => "mix_rand",
            InfillMethod::Fgsm => "fgsm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgsmTarget {
    RandomOtherClass,
    Untargeted,
}

/// How to build one augmented view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfillSpec {
    pub mode: AugMode,
    pub method: InfillMethod,
    pub epsilon: f64,
    pub fgsm_target: FgsmTarget,
}

impl InfillSpec {
    pub fn counterfactual(method: InfillMethod) -> Self {
        Self {
            mode: AugMode::Counterfactual,
            method,
            epsilon: DEFAULT_EPSILON,
            fgsm_target: FgsmTarget::RandomOtherClass,
        }
    }

    pub fn factual(method: InfillMethod) -> Self {
        Self {
            mode: AugMode::Factual,
            method,
            epsilon: DEFAULT_EPSILON,
            fgsm_target: FgsmTarget::RandomOtherClass,
        }
    }

    pub fn validate(&self) -> AugResult<()> {
        if !self.method.valid_for(self.mode) {
            let mode = match self.mode {
                AugMode::Counterfactual => "counterfactual",
                AugMode::Factual => "factual",
            };
            return Err(AugError::Config(format!(
                "{} infill is not valid for {mode} augmentation",
                self.method.name()
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(AugError::Config(format!(
                "epsilon must be finite and > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Batch augmentation recipe: `2·|meta|` views are added, `cf_fraction` of
/// them counterfactual (0.5 when both modes run, giving the 1:1 ratio).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub cf_fraction: f64,
    pub cf_method: InfillMethod,
    pub f_method: InfillMethod,
    pub epsilon: f64,
    pub fgsm_target: FgsmTarget,
    pub seed: u64,
}

impl AugmentPlan {
    pub fn both(cf_method: InfillMethod, f_method: InfillMethod, seed: u64) -> Self {
        Self {
            cf_fraction: 0.5,
            cf_method,
            f_method,
            epsilon: DEFAULT_EPSILON,
            fgsm_target: FgsmTarget::RandomOtherClass,
            seed,
        }
    }

    pub fn validate(&self) -> AugResult<()> {
        if !(0.0..=1.0).contains(&self.cf_fraction) {
            return Err(AugError::Config(format!(
                "cf_fraction must be in [0,1], got {}",
                self.cf_fraction
            )));
        }
        self.cf_spec().validate()?;
        self.f_spec().validate()?;
        Ok(())
    }

    pub fn cf_spec(&self) -> InfillSpec {
        InfillSpec {
            mode: AugMode::Counterfactual,
            method: self.cf_method,
            epsilon: self.epsilon,
            fgsm_target: self.fgsm_target,
        }
    }

    pub fn f_spec(&self) -> InfillSpec {
        InfillSpec {
            mode: AugMode::Factual,
            method: self.f_method,
            epsilon: self.epsilon,
            fgsm_target: self.fgsm_target,
        }
    }
}

/// Bounding box (r0, r1, c0, c1 inclusive) of the mask's 1-pixels.
fn mask_bbox(mask: &[u8], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (p, &m) in mask.iter().enumerate() {
        if m == 1 {
            let (r, c) = (p / width, p % width);
            bbox = Some(match bbox {
                None => (r, r, c, c),
                Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
            });
        }
    }
    bbox
}

/// Low-frequency base field: one Uniform[0,1) draw per channel per 4×4 block,
/// expanded to pixels; plus per-channel per-pixel Gaussian noise. Returned
/// separately so the pre-truncation noise statistics are observable.
fn random_infill_parts(
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<f32>) {
    let hw = height * width;
    let bh = height.div_ceil(RANDOM_BLOCK);
    let bw = width.div_ceil(RANDOM_BLOCK);
    let blocks: Vec<f32> = (0..3 * bh * bw)
        .map(|_| rng.random_range(0.0f32..1.0))
        .collect();
    let mut base = vec![0f32; 3 * hw];
    for ch in 0..3 {
        for r in 0..height {
            for c in 0..width {
                base[ch * hw + r * width + c] =
                    blocks[ch * bh * bw + (r / RANDOM_BLOCK) * bw + c / RANDOM_BLOCK];
            }
        }
    }
    let normal = Normal::new(0.0f32, RANDOM_SIGMA).expect("constant sigma");
    let noise: Vec<f32> = (0..3 * hw).map(|_| normal.sample(rng)).collect();
    (base, noise)
}

fn random_infill(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (base, noise) = random_infill_parts(height, width, rng);
    base.iter()
        .zip(&noise)
        .map(|(&b, &n)| util::clamp01(b + n))
        .collect()
}

/// Permutes the pixels of the target region among themselves (foreground for
/// counterfactual views, background for factual ones); all other pixels keep
/// their values. RGB triples move together.
fn shuffle_infill(
    sample: &SampleRecord,
    height: usize,
    width: usize,
    region_is_mask: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let hw = height * width;
    let region: Vec<usize> = (0..hw)
        .filter(|&p| (sample.mask[p] == 1) == region_is_mask)
        .collect();
    let mut perm = region.clone();
    perm.shuffle(rng);
    let mut out = sample.pixels.clone();
    for (&dst, &src) in region.iter().zip(&perm) {
        for ch in 0..3 {
            out[ch * hw + dst] = sample.pixels[ch * hw + src];
        }
    }
    out
}

/// Largest of the four background strips around the mask bbox, tiled over
/// the whole image by modular indexing. `None` when the bbox leaves no
/// background at all.
fn tile_infill(sample: &SampleRecord, height: usize, width: usize) -> Option<Vec<f32>> {
    let Some((r0, r1, c0, c1)) = mask_bbox(&sample.mask, width) else {
        // no foreground: the whole image is background, tiling is identity
        return Some(sample.pixels.clone());
    };
    // (top row, left col, strip height, strip width) candidates in fixed
    // tie-break order: top, bottom, left, right
    let strips = [
        (0, 0, r0, width),
        (r1 + 1, 0, height - r1 - 1, width),
        (0, 0, height, c0),
        (0, c1 + 1, height, width - c1 - 1),
    ];
    let (sr, sc, sh, sw) = strips
        .into_iter()
        .max_by_key(|&(_, _, h, w)| h * w)
        .expect("four candidates");
    if sh * sw == 0 {
        return None;
    }
    let hw = height * width;
    let mut out = vec![0f32; 3 * hw];
    for ch in 0..3 {
        for r in 0..height {
            for c in 0..width {
                let src = (sr + r % sh) * width + (sc + c % sw);
                out[ch * hw + r * width + c] = sample.pixels[ch * hw + src];
            }
        }
    }
    Some(out)
}

/// The donor's background everywhere: donor pixels where the donor mask is
/// 0, the donor's tile infill where it is 1.
fn mix_rand_infill(donor: &SampleRecord, height: usize, width: usize) -> Vec<f32> {
    let hw = height * width;
    let fill = tile_infill(donor, height, width).unwrap_or_else(|| {
        log::warn!("mix_rand donor has no background strip; falling back to grey");
        vec![0.5; 3 * hw]
    });
    let mut out = donor.pixels.clone();
    for p in 0..hw {
        if donor.mask[p] == 1 {
            for ch in 0..3 {
                out[ch * hw + p] = fill[ch * hw + p];
            }
        }
    }
    out
}

/// One FGSM step on the whole image under a frozen classifier snapshot:
/// targeted mode descends the loss of a uniformly random other class,
/// untargeted mode ascends the loss of the sample's own label. Clamped to
/// [0,1].
fn fgsm_infill<F: Scalar>(
    sample: &SampleRecord,
    epsilon: f64,
    target: FgsmTarget,
    rng: &mut ChaCha8Rng,
    model: &Mlp<F>,
) -> AugResult<Vec<f32>> {
    let classes = model.classes();
    let y = sample.label as usize;
    if y >= classes {
        return Err(AugError::Augment(format!(
            "label {y} outside the classifier's {classes} classes"
        )));
    }
    let (loss_label, step_dir) = match target {
        FgsmTarget::RandomOtherClass => {
            let j = rng.random_range(0..classes - 1);
            let t = if j >= y { j + 1 } else { j };
            (t, -1.0f32)
        }
        FgsmTarget::Untargeted => (y, 1.0f32),
    };
    let mut g = Graph::new();
    let params = model.bind_frozen(&mut g)?;
    let xdata: Vec<F> = sample.pixels.iter().map(|&v| lit::<F>(v as f64)).collect();
    let x = g.leaf(Tensor::from_vec(vec![1, xdata.len()], xdata)?, true)?;
    let (_, logits) = model.forward(&mut g, &params, x)?;
    let lsm = g.log_softmax(logits)?;
    let picked = g.row_gather(lsm, &[loss_label])?;
    let summed = g.sum(picked)?;
    let loss = g.scale(summed, lit::<F>(-1.0))?;
    let grads = g.backward(loss, &[x], false)?;
    let gx = g.value(grads[0]);
    let eps = epsilon as f32;
    let out = sample
        .pixels
        .iter()
        .zip(gx.data())
        .map(|(&p, &gv)| {
            let s = if gv > F::zero() {
                1.0f32
            } else if gv < F::zero() {
                -1.0
            } else {
                0.0
            };
            util::clamp01(p + step_dir * eps * s)
        })
        .collect();
    Ok(out)
}

/// Builds the full-image infill value x̂ for one sample. `donor` is required
/// by mix_rand (a different-class sample from the same metadata batch) and
/// `model` by fgsm. The rng is consumed only by random/shuffle/fgsm.
pub fn infill_value<F: Scalar>(
    sample: &SampleRecord,
    height: usize,
    width: usize,
    spec: &InfillSpec,
    rng: &mut ChaCha8Rng,
    donor: Option<&SampleRecord>,
    model: Option<&Mlp<F>>,
) -> AugResult<Vec<f32>> {
    spec.validate()?;
    let hw = height * width;
    match spec.method {
        InfillMethod::Grey => Ok(vec![0.5; 3 * hw]),
        InfillMethod::Random => Ok(random_infill(height, width, rng)),
        InfillMethod::Shuffle => Ok(shuffle_infill(
            sample,
            height,
            width,
            spec.mode == AugMode::Counterfactual,
            rng,
        )),
        InfillMethod::Tile => Ok(tile_infill(sample, height, width).unwrap_or_else(|| {
            log::warn!("tile infill found no background strip; falling back to grey");
            vec![0.5; 3 * hw]
        })),
        InfillMethod::MixRand => {
            let donor = donor.ok_or_else(|| {
                AugError::Augment("mix_rand needs a different-class donor sample".into())
            })?;
            if donor.label == sample.label {
                return Err(AugError::Augment(
                    "mix_rand donor must come from a different class".into(),
                ));
            }
            Ok(mix_rand_infill(donor, height, width))
        }
        InfillMethod::Fgsm => {
            let model = model.ok_or_else(|| {
                AugError::Augment("fgsm infill needs a classifier snapshot".into())
            })?;
            fgsm_infill(sample, spec.epsilon, spec.fgsm_target, rng, model)
        }
    }
}

/// `(1−r)⊙x + r⊙x̂` by per-pixel selection (exact, no arithmetic).
fn blend_counterfactual(x: &[f32], mask: &[u8], xhat: &[f32], hw: usize) -> Vec<f32> {
    (0..3 * hw)
        .map(|i| if mask[i % hw] == 1 { xhat[i] } else { x[i] })
        .collect()
}

/// `r⊙x + (1−r)⊙x̂` by per-pixel selection (exact, no arithmetic).
fn blend_factual(x: &[f32], mask: &[u8], xhat: &[f32], hw: usize) -> Vec<f32> {
    (0..3 * hw)
        .map(|i| if mask[i % hw] == 1 { x[i] } else { xhat[i] })
        .collect()
}

fn require_mask(sample: &SampleRecord) -> AugResult<()> {
    if sample.mask.iter().all(|&m| m == 0) {
        return Err(AugError::Augment(
            "sample has an empty causal mask; nothing to augment".into(),
        ));
    }
    Ok(())
}

/// Counterfactual view: foreground replaced by x̂, background untouched. The
/// label field keeps the original label; the counterfactual flag tells the
/// loss layer to read it as "anything but this class".
pub fn counterfactual_augment<F: Scalar>(
    sample: &SampleRecord,
    height: usize,
    width: usize,
    spec: &InfillSpec,
    rng: &mut ChaCha8Rng,
    donor: Option<&SampleRecord>,
    model: Option<&Mlp<F>>,
) -> AugResult<SampleRecord> {
    if spec.mode != AugMode::Counterfactual {
        return Err(AugError::Config("spec mode must be counterfactual".into()));
    }
    require_mask(sample)?;
    let xhat = infill_value(sample, height, width, spec, rng, donor, model)?;
    let hw = height * width;
    Ok(SampleRecord {
        pixels: blend_counterfactual(&sample.pixels, &sample.mask, &xhat, hw),
        mask: sample.mask.clone(),
        label: sample.orig_label,
        orig_label: sample.orig_label,
        group: sample.group,
        flags: sample.flags | FLAG_COUNTERFACTUAL,
    })
}

/// Factual view: background replaced by x̂, foreground and label untouched.
pub fn factual_augment<F: Scalar>(
    sample: &SampleRecord,
    height: usize,
    width: usize,
    spec: &InfillSpec,
    rng: &mut ChaCha8Rng,
    donor: Option<&SampleRecord>,
    model: Option<&Mlp<F>>,
) -> AugResult<SampleRecord> {
    if spec.mode != AugMode::Factual {
        return Err(AugError::Config("spec mode must be factual".into()));
    }
    require_mask(sample)?;
    let xhat = infill_value(sample, height, width, spec, rng, donor, model)?;
    let hw = height * width;
    Ok(SampleRecord {
        pixels: blend_factual(&sample.pixels, &sample.mask, &xhat, hw),
        mask: sample.mask.clone(),
        label: sample.label,
        orig_label: sample.orig_label,
        group: sample.group,
        flags: sample.flags | FLAG_FACTUAL,
    })
}

/// Augments a metadata container: the output holds the originals followed by
/// a counterfactual block and a factual block totalling 2·|meta| new views.
/// Sources cycle round-robin through the metadata; every augmented view gets
/// its own rng substream (seed ⊕ view index), so output is deterministic.
/// Mix_rand donors are drawn uniformly from the different-class originals.
pub fn augment_metadata<F: Scalar>(
    meta: &DatasetContainer,
    plan: &AugmentPlan,
    model: Option<&Mlp<F>>,
) -> AugResult<DatasetContainer> {
    plan.validate()?;
    if meta.is_empty() {
        return Err(AugError::Config("metadata container is empty".into()));
    }
    let m = meta.len();
    let total = 2 * m;
    let n_cf = (total as f64 * plan.cf_fraction).round() as usize;
    let (height, width) = (meta.height(), meta.width());
    let mut out: Vec<SampleRecord> = meta.samples().to_vec();
    out.reserve(total);
    for aug_idx in 0..total {
        let mut rng = util::substream_rng(plan.seed, aug_idx as u64);
        let counterfactual = aug_idx < n_cf;
        let src_idx = if counterfactual {
            aug_idx % m
        } else {
            (aug_idx - n_cf) % m
        };
        let source = meta.sample(src_idx);
        let spec = if counterfactual {
            plan.cf_spec()
        } else {
            plan.f_spec()
        };
        let donor_idx = if spec.method == InfillMethod::MixRand {
            let candidates: Vec<usize> = (0..m)
                .filter(|&j| meta.sample(j).label != source.label)
                .collect();
            if candidates.is_empty() {
                return Err(AugError::Augment(format!(
                    "no different-class donor for a class-{} sample",
                    source.label
                )));
            }
            Some(candidates[rng.random_range(0..candidates.len())])
        } else {
            None
        };
        let donor = donor_idx.map(|j| meta.sample(j));
        let view = if counterfactual {
            counterfactual_augment(source, height, width, &spec, &mut rng, donor, model)?
        } else {
            factual_augment(source, height, width, &spec, &mut rng, donor, model)?
        };
        out.push(view);
    }
    Ok(DatasetContainer::new(
        meta.classes() as u16,
        height as u16,
        width as u16,
        out,
        format!(
            "{} | augment cf={} f={} frac={} seed={}",
            meta.provenance,
            plan.cf_method.name(),
            plan.f_method.name(),
            plan.cf_fraction,
            plan.seed
        ),
    )?)
}
