//! Synthetic spurious-correlation image data and bias injection.
//!
//! "SpurShapes" images composite a class-determined vivid shape onto a dull
//! background texture. With probability `rho` a training sample gets the
//! background linked to its class (`b(k) = k mod B`), otherwise a uniformly
//! random other one — so background identity is a tunable shortcut feature.
//! Every sample carries the ground-truth causal mask (the shape's bounding
//! box), which downstream modules use to build counterfactual/factual views
//! and saliency-regularizer weights.
//!
//! The bias operators reshape an existing container: geometric long-tail
//! subsampling, exact-count label corruption (uniform or ring-adjacent flip),
//! explicit per-group subsampling, and a clean, group-balanced meta split.
//! Everything here is a pure function of (input, seed); per-sample synthesis
//! uses an independent rng substream per global index, so containers are
//! bit-identical across runs for the same arguments.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::util;

/// Sample-level flag bits.
pub const FLAG_COUNTERFACTUAL: u8 = 1;
pub const FLAG_FACTUAL: u8 = 1 << 1;
pub const FLAG_NOISED: u8 = 1 << 2;
const KNOWN_FLAGS: u8 = FLAG_COUNTERFACTUAL | FLAG_FACTUAL | FLAG_NOISED;

/// Container file magic and version.
const MAGIC: &[u8; 4] = b"CLPD";
const FORMAT_VERSION: u16 = 1;

/// Vivid per-class foreground colors (RGB). The shape library and this table
/// bound the class count at 6.
const CLASS_COLORS: [[f32; 3]; 6] = [
    [0.90, 0.08, 0.08],
    [0.08, 0.90, 0.08],
    [0.08, 0.08, 0.90],
    [0.90, 0.90, 0.08],
    [0.90, 0.08, 0.90],
    [0.08, 0.90, 0.90],
];

/// Per-background styles: (base, accent, texture kind). Every background has
/// its own clearly distinguishable mid-tone palette — the non-causal factor
/// must be easy to pick up for the spurious-correlation benchmarks — while
/// staying far from every entry of [`CLASS_COLORS`]. Texture kinds: 0 solid,
/// 1 stripes, 2 checker, 3 speckle (solid ± per-pixel noise).
const BACKGROUND_STYLES: [([f32; 3], [f32; 3], usize); 8] = [
    ([0.72, 0.62, 0.45], [0.62, 0.52, 0.37], 0),
    ([0.42, 0.50, 0.68], [0.32, 0.40, 0.56], 1),
    ([0.50, 0.66, 0.48], [0.40, 0.54, 0.38], 2),
    ([0.64, 0.48, 0.62], [0.54, 0.38, 0.52], 3),
    ([0.30, 0.32, 0.35], [0.40, 0.42, 0.45], 0),
    ([0.58, 0.58, 0.30], [0.46, 0.46, 0.22], 1),
    ([0.28, 0.56, 0.58], [0.20, 0.44, 0.46], 2),
    ([0.62, 0.40, 0.30], [0.50, 0.30, 0.22], 3),
];
const SPECKLE_AMP: f32 = 0.05;

pub const MAX_CLASSES: usize = CLASS_COLORS.len();
pub const MAX_BACKGROUNDS: usize = BACKGROUND_STYLES.len();

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data config: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type DataResult<T> = Result<T, DataError>;

/// One image with its ground-truth causal geometry and label lineage.
/// `pixels` is channel-planar (`ch·H·W + row·W + col`) in [0,1]; `mask` is
/// row-major H·W bytes in {0,1} with 1 marking the causal region.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub pixels: Vec<f32>,
    pub mask: Vec<u8>,
    pub label: u16,
    pub orig_label: u16,
    pub group: u16,
    pub flags: u8,
}

impl SampleRecord {
    pub fn is_counterfactual(&self) -> bool {
        self.flags & FLAG_COUNTERFACTUAL != 0
    }

    pub fn is_noised(&self) -> bool {
        self.flags & FLAG_NOISED != 0
    }
}

/// An ordered, immutable set of samples with consistent geometry. Class
/// counts are computed at construction and always agree with a label scan.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContainer {
    classes: u16,
    height: u16,
    width: u16,
    samples: Vec<SampleRecord>,
    class_counts: Vec<usize>,
    /// Human-readable synthesis/bias lineage (in-memory only, not serialized).
    pub provenance: String,
}

impl DatasetContainer {
    /// Validates every record against the container geometry and computes
    /// class counts.
    pub fn new(
        classes: u16,
        height: u16,
        width: u16,
        samples: Vec<SampleRecord>,
        provenance: String,
    ) -> DataResult<Self> {
        if classes < 2 {
            return Err(DataError::Config(format!(
                "container needs ≥ 2 classes, got {classes}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(DataError::Config("container needs H, W ≥ 1".into()));
        }
        let hw = height as usize * width as usize;
        let mut class_counts = vec![0usize; classes as usize];
        for (i, s) in samples.iter().enumerate() {
            if s.label >= classes || s.orig_label >= classes {
                return Err(DataError::Config(format!(
                    "sample {i}: label {} / orig {} out of range 0..{classes}",
                    s.label, s.orig_label
                )));
            }
            if s.mask.len() != hw || s.pixels.len() != 3 * hw {
                return Err(DataError::Config(format!(
                    "sample {i}: mask/pixel lengths {}/{} don't match {height}×{width}",
                    s.mask.len(),
                    s.pixels.len()
                )));
            }
            if s.mask.iter().any(|&m| m > 1) {
                return Err(DataError::Config(format!(
                    "sample {i}: mask byte outside {{0,1}}"
                )));
            }
            if s.pixels.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
                return Err(DataError::Config(format!(
                    "sample {i}: pixel outside [0,1]"
                )));
            }
            if s.flags & !KNOWN_FLAGS != 0 {
                return Err(DataError::Config(format!(
                    "sample {i}: unknown flag bits {:#04x}",
                    s.flags
                )));
            }
            class_counts[s.label as usize] += 1;
        }
        Ok(Self {
            classes,
            height,
            width,
            samples,
            class_counts,
            provenance,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes as usize
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    /// Flattened pixel dimension of one sample (3·H·W).
    pub fn pixel_dim(&self) -> usize {
        3 * self.height as usize * self.width as usize
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &SampleRecord {
        &self.samples[i]
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// Distinct group ids present, sorted ascending.
    pub fn group_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.samples.iter().map(|s| s.group).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// The knobs for the four bias regimes, bundled for config plumbing.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasSpec {
    /// Max-to-min class-size ratio of the long-tail schedule (1 = balanced).
    pub imbalance_ratio: f64,
    pub noise_kind: NoiseKind,
    pub noise_ratio: f64,
    /// Probability a sample's background is the class-linked one.
    pub spuriousness: f64,
    /// Optional explicit per-group target counts, sorted by group id.
    pub group_counts: Option<Vec<(u16, usize)>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Uniform,
    Flip,
}

impl BiasSpec {
    pub fn validate(&self) -> DataResult<()> {
        if !(self.imbalance_ratio >= 1.0) {
            return Err(DataError::Config(format!(
                "imbalance_ratio must be ≥ 1, got {}",
                self.imbalance_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return Err(DataError::Config(format!(
                "noise_ratio must be in [0,1), got {}",
                self.noise_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.spuriousness) {
            return Err(DataError::Config(format!(
                "spuriousness must be in [0,1], got {}",
                self.spuriousness
            )));
        }
        if self.noise_kind == NoiseKind::None && self.noise_ratio > 0.0 {
            return Err(DataError::Config(
                "noise_ratio > 0 with noise_kind = none".into(),
            ));
        }
        if let Some(gc) = &self.group_counts {
            if gc.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(DataError::Config(
                    "group_counts must be sorted by group id without duplicates".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Shape bounding-box side bounds for an image whose smaller dimension is
/// `min_dim`. Shapes are kept small relative to the canvas so the causal
/// foreground is a genuinely weaker signal than the background.
fn scale_bounds(min_dim: usize) -> (usize, usize) {
    ((min_dim / 4).max(6), (min_dim * 2 / 5).max(6))
}

/// Whether local pixel (r, c) of an s×s bounding box belongs to the shape.
/// Every shape touches all four box sides and fills > 50% of the box at the
/// smallest supported side (6), so shapes stay visible inside their masks.
fn shape_covers(shape: usize, r: usize, c: usize, s: usize) -> bool {
    let sf = s as f64;
    let center = (sf - 1.0) / 2.0;
    let dr = r as f64 - center;
    let dc = c as f64 - center;
    match shape {
        // square
        0 => true,
        // disk
        1 => {
            let radius = (sf - 1.0) / 2.0 + 0.1;
            dr * dr + dc * dc <= radius * radius
        }
        // cross
        2 => {
            let w = (sf * 0.2).round().max(1.0);
            dr.abs() <= w || dc.abs() <= w
        }
        // fat triangle: narrow band at the top widening to the full base
        3 => {
            let frac = r as f64 / (sf - 1.0);
            let halfw = (0.18 + 0.32 * frac) * (sf - 1.0);
            dc.abs() <= halfw + 1e-9
        }
        // ring (hole kept small so discrete coverage stays > 50% even at
        // the worst odd side lengths)
        4 => {
            let outer = (sf - 1.0) / 2.0 + 0.1;
            let inner = outer * 0.30;
            let d2 = dr * dr + dc * dc;
            d2 >= inner * inner && d2 <= outer * outer
        }
        // diagonal bar
        5 => (r as f64 - c as f64).abs() <= sf * 0.38,
        _ => unreachable!("shape library has {MAX_CLASSES} entries"),
    }
}

/// Renders background `bg` into a fresh channel-planar pixel buffer using
/// that background's style entry; only speckle consumes the rng (one draw
/// per pixel, row-major).
fn render_background(bg: usize, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (base, accent, kind) = BACKGROUND_STYLES[bg];
    let hw = height * width;
    let mut pixels = vec![0f32; 3 * hw];
    for r in 0..height {
        for c in 0..width {
            let color = match kind {
                0 => base,
                1 => {
                    if (r / 4) % 2 == 0 {
                        base
                    } else {
                        accent
                    }
                }
                2 => {
                    if (r / 4 + c / 4) % 2 == 0 {
                        base
                    } else {
                        accent
                    }
                }
                _ => {
                    let n: f32 = rng.random_range(-SPECKLE_AMP..=SPECKLE_AMP);
                    [
                        util::clamp01(base[0] + n),
                        util::clamp01(base[1] + n),
                        util::clamp01(base[2] + n),
                    ]
                }
            };
            let p = r * width + c;
            for (ch, &v) in color.iter().enumerate() {
                pixels[ch * hw + p] = v;
            }
        }
    }
    pixels
}

/// Synthesizes a class-balanced SpurShapes dataset: `classes × n_per_class`
/// samples, deterministic for the given arguments. Each sample's background
/// is the class-linked texture `label mod backgrounds` with probability
/// `rho`, else uniform over the others; `group = label·backgrounds + bg`.
pub fn synth_spurshapes(
    classes: usize,
    backgrounds: usize,
    height: usize,
    width: usize,
    n_per_class: usize,
    rho: f64,
    seed: u64,
) -> DataResult<DatasetContainer> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(DataError::Config(format!(
            "classes must be in 2..={MAX_CLASSES}, got {classes}"
        )));
    }
    if !(2..=MAX_BACKGROUNDS).contains(&backgrounds) {
        return Err(DataError::Config(format!(
            "backgrounds must be in 2..={MAX_BACKGROUNDS}, got {backgrounds}"
        )));
    }
    if height < 16 || width < 16 || height > u16::MAX as usize || width > u16::MAX as usize {
        return Err(DataError::Config(format!(
            "image size must be ≥ 16×16, got {height}×{width}"
        )));
    }
    if n_per_class == 0 {
        return Err(DataError::Config("n_per_class must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(DataError::Config(format!(
            "spuriousness must be in [0,1], got {rho}"
        )));
    }
    let (side_min, side_max) = scale_bounds(height.min(width));
    if side_min > side_max {
        return Err(DataError::Config(format!(
            "shape scale bounds {side_min}..{side_max} don't fit a {height}×{width} image"
        )));
    }
    let hw = height * width;
    let mut samples = Vec::with_capacity(classes * n_per_class);
    for k in 0..classes {
        let linked = k % backgrounds;
        for i in 0..n_per_class {
            let global = (k * n_per_class + i) as u64;
            let mut rng = util::substream_rng(seed, global);
            // rng order: background choice, speckle noise (if any), then
            // shape side / row / col.
            let bg = if rng.random_bool(rho) {
                linked
            } else {
                let j = rng.random_range(0..backgrounds - 1);
                if j >= linked {
                    j + 1
                } else {
                    j
                }
            };
            let mut pixels = render_background(bg, height, width, &mut rng);
            let side = rng.random_range(side_min..=side_max);
            let r0 = rng.random_range(0..=height - side);
            let c0 = rng.random_range(0..=width - side);
            let color = CLASS_COLORS[k];
            let mut mask = vec![0u8; hw];
            for r in 0..side {
                for c in 0..side {
                    let p = (r0 + r) * width + (c0 + c);
                    mask[p] = 1;
                    if shape_covers(k, r, c, side) {
                        for (ch, &v) in color.iter().enumerate() {
                            pixels[ch * hw + p] = v;
                        }
                    }
                }
            }
            samples.push(SampleRecord {
                pixels,
                mask,
                label: k as u16,
                orig_label: k as u16,
                group: (k * backgrounds + bg) as u16,
                flags: 0,
            });
        }
    }
    DatasetContainer::new(
        classes as u16,
        height as u16,
        width as u16,
        samples,
        format!(
            "spurshapes seed={seed} C={classes} B={backgrounds} {height}x{width} n={n_per_class} rho={rho}"
        ),
    )
}

/// Subsamples a class-balanced dataset to the geometric long-tail schedule:
/// class k keeps ⌊n·ratio^(−k/(C−1))⌋ samples, chosen without replacement.
/// Relative sample order is preserved.
pub fn apply_longtail(
    ds: &DatasetContainer,
    ratio: f64,
    seed: u64,
) -> DataResult<DatasetContainer> {
    if !ratio.is_finite() || ratio < 1.0 {
        return Err(DataError::Config(format!(
            "long-tail ratio must be ≥ 1, got {ratio}"
        )));
    }
    let c = ds.classes();
    let n = ds.class_counts()[0];
    if ds.class_counts().iter().any(|&x| x != n) {
        return Err(DataError::Config(format!(
            "long-tail requires a class-balanced input, counts are {:?}",
            ds.class_counts()
        )));
    }
    if ratio > n as f64 {
        return Err(DataError::Infeasible(format!(
            "ratio {ratio} exceeds per-class count {n}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, s) in ds.samples().iter().enumerate() {
        by_class[s.label as usize].push(i);
    }
    let denom = (c - 1).max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (k, idxs) in by_class.iter().enumerate() {
        let target = (n as f64 * ratio.powf(-(k as f64) / denom)).floor() as usize;
        keep.extend(index::sample(&mut rng, idxs.len(), target).into_iter().map(|j| idxs[j]));
    }
    keep.sort_unstable();
    let samples = keep.iter().map(|&i| ds.samples()[i].clone()).collect();
    DatasetContainer::new(
        ds.classes,
        ds.height,
        ds.width,
        samples,
        format!("{} | longtail ratio={ratio} seed={seed}", ds.provenance),
    )
}

/// Corrupts the labels of exactly ⌊ratio·N⌋ samples chosen without
/// replacement. `Uniform` draws uniformly over the other C−1 classes; `Flip`
/// draws uniformly over the two ring-adjacent classes of the original label.
/// Original labels are preserved and corrupted samples get the noise flag.
pub fn inject_label_noise(
    ds: &DatasetContainer,
    kind: NoiseKind,
    ratio: f64,
    seed: u64,
) -> DataResult<DatasetContainer> {
    if kind == NoiseKind::None {
        return Err(DataError::Config(
            "noise kind must be uniform or flip (none is a no-op)".into(),
        ));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Config(format!(
            "noise ratio must be in (0,1), got {ratio}"
        )));
    }
    let c = ds.classes();
    if kind == NoiseKind::Flip && c < 3 {
        return Err(DataError::Config(format!(
            "flip noise needs ≥ 3 classes, got {c}"
        )));
    }
    let total = ds.len();
    let m = (ratio * total as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = index::sample(&mut rng, total, m).into_vec();
    selected.sort_unstable();
    let mut samples = ds.samples().to_vec();
    for &i in &selected {
        let s = &mut samples[i];
        let orig = s.orig_label as usize;
        let new = match kind {
            NoiseKind::Uniform => {
                let j = rng.random_range(0..c - 1);
                if j >= orig {
                    j + 1
                } else {
                    j
                }
            }
            NoiseKind::Flip => {
                if rng.random_range(0..2u32) == 0 {
                    (orig + 1) % c
                } else {
                    (orig + c - 1) % c
                }
            }
            NoiseKind::None => unreachable!(),
        };
        s.label = new as u16;
        s.flags |= FLAG_NOISED;
    }
    let kind_name = match kind {
        NoiseKind::Uniform => "uniform",
        NoiseKind::Flip => "flip",
        NoiseKind::None => unreachable!(),
    };
    DatasetContainer::new(
        ds.classes,
        ds.height,
        ds.width,
        samples,
        format!(
            "{} | noise kind={kind_name} ratio={ratio} seed={seed}",
            ds.provenance
        ),
    )
}

/// Subsamples listed groups to explicit target counts (attribute imbalance);
/// unlisted groups are kept whole. `targets` must be sorted by group id.
pub fn apply_group_counts(
    ds: &DatasetContainer,
    targets: &[(u16, usize)],
    seed: u64,
) -> DataResult<DatasetContainer> {
    if targets.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(DataError::Config(
            "group targets must be sorted by group id without duplicates".into(),
        ));
    }
    let mut by_group: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples().iter().enumerate() {
        by_group.entry(s.group).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for &(gid, want) in targets {
        let idxs = by_group.remove(&gid).ok_or_else(|| {
            DataError::Infeasible(format!("group {gid} not present in dataset"))
        })?;
        if want > idxs.len() {
            return Err(DataError::Infeasible(format!(
                "group {gid} has {} samples, need {want}",
                idxs.len()
            )));
        }
        keep.extend(index::sample(&mut rng, idxs.len(), want).into_iter().map(|j| idxs[j]));
    }
    for idxs in by_group.into_values() {
        keep.extend(idxs);
    }
    keep.sort_unstable();
    let samples = keep.iter().map(|&i| ds.samples()[i].clone()).collect();
    DatasetContainer::new(
        ds.classes,
        ds.height,
        ds.width,
        samples,
        format!("{} | group_counts {targets:?} seed={seed}", ds.provenance),
    )
}

/// Splits off a clean meta subset: exactly `per_class` unflagged, correctly
/// labeled samples per class, drawn round-robin over each class's groups so
/// the subset is as group-balanced as the data allows. Returns (meta, rest);
/// the two partition the input and both preserve relative order.
pub fn draw_meta_subset(
    ds: &DatasetContainer,
    per_class: usize,
    seed: u64,
) -> DataResult<(DatasetContainer, DatasetContainer)> {
    if per_class == 0 {
        return Err(DataError::Config("meta per_class must be ≥ 1".into()));
    }
    let c = ds.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(c * per_class);
    for k in 0..c {
        let mut by_group: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (i, s) in ds.samples().iter().enumerate() {
            let clean = s.flags & FLAG_NOISED == 0 && s.label == s.orig_label;
            if s.label as usize == k && clean {
                by_group.entry(s.group).or_default().push(i);
            }
        }
        let total: usize = by_group.values().map(Vec::len).sum();
        if total < per_class {
            return Err(DataError::Infeasible(format!(
                "class {k} has {total} clean samples, meta needs {per_class}"
            )));
        }
        let mut queues: Vec<Vec<usize>> = by_group.into_values().collect();
        for q in &mut queues {
            q.shuffle(&mut rng);
        }
        let n_groups = queues.len();
        let mut taken = 0;
        let mut turn = 0;
        while taken < per_class {
            if let Some(i) = queues[turn % n_groups].pop() {
                chosen.push(i);
                taken += 1;
            }
            turn += 1;
        }
    }
    chosen.sort_unstable();
    let mut in_meta = vec![false; ds.len()];
    for &i in &chosen {
        in_meta[i] = true;
    }
    let mut meta_samples = Vec::with_capacity(chosen.len());
    let mut rest_samples = Vec::with_capacity(ds.len() - chosen.len());
    for (i, s) in ds.samples().iter().enumerate() {
        if in_meta[i] {
            meta_samples.push(s.clone());
        } else {
            rest_samples.push(s.clone());
        }
    }
    let meta = DatasetContainer::new(
        ds.classes,
        ds.height,
        ds.width,
        meta_samples,
        format!("{} | meta per_class={per_class} seed={seed}", ds.provenance),
    )?;
    let rest = DatasetContainer::new(
        ds.classes,
        ds.height,
        ds.width,
        rest_samples,
        format!("{} | rest per_class={per_class} seed={seed}", ds.provenance),
    )?;
    Ok((meta, rest))
}

/// Serializes a container to its little-endian binary form (see
/// [`read_container`] for the layout) and writes it atomically.
pub fn write_container(ds: &DatasetContainer, path: &Path) -> DataResult<()> {
    if ds.len() > u32::MAX as usize {
        return Err(DataError::Config(format!(
            "container has {} samples, format caps at {}",
            ds.len(),
            u32::MAX
        )));
    }
    let hw = ds.height() * ds.width();
    let mut out = Vec::with_capacity(16 + ds.len() * (9 + hw + 12 * hw));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&ds.classes.to_le_bytes());
    out.extend_from_slice(&ds.height.to_le_bytes());
    out.extend_from_slice(&ds.width.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    for s in ds.samples() {
        out.extend_from_slice(&s.label.to_le_bytes());
        out.extend_from_slice(&s.orig_label.to_le_bytes());
        out.extend_from_slice(&s.group.to_le_bytes());
        out.push(s.flags);
        out.push(0); // pad
        out.extend_from_slice(&s.mask);
        for p in &s.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    util::atomic_write(path, &out)?;
    Ok(())
}

/// Byte-offset-tracking little-endian reader over an in-memory buffer.
struct LeReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> LeReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> DataResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Format {
                offset: self.pos,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> DataResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> DataResult<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> DataResult<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> DataResult<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a container written by [`write_container`]. Layout, little-endian:
/// magic "CLPD", version u16 = 1, C u16, H u16, W u16, N u32, then per
/// sample: label u16, orig_label u16, group u16, flags u8, pad u8, mask H·W
/// bytes, pixels 3·H·W f32. Any structural or value violation is a format
/// error naming the byte offset; nothing partial is ever returned.
pub fn read_container(path: &Path) -> DataResult<DatasetContainer> {
    let buf = std::fs::read(path)?;
    let mut r = LeReader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DataError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version_at = r.pos;
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Format {
            offset: version_at,
            msg: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let classes_at = r.pos;
    let classes = r.u16("class count")?;
    if classes < 2 {
        return Err(DataError::Format {
            offset: classes_at,
            msg: format!("class count {classes} < 2"),
        });
    }
    let dims_at = r.pos;
    let height = r.u16("height")?;
    let width = r.u16("width")?;
    if height == 0 || width == 0 {
        return Err(DataError::Format {
            offset: dims_at,
            msg: format!("zero image dimension {height}×{width}"),
        });
    }
    let n = r.u32("sample count")? as usize;
    let hw = height as usize * width as usize;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label_at = r.pos;
        let label = r.u16("label")?;
        let orig_at = r.pos;
        let orig_label = r.u16("orig_label")?;
        let group = r.u16("group")?;
        let flags_at = r.pos;
        let flags = r.u8("flags")?;
        let pad_at = r.pos;
        let pad = r.u8("pad")?;
        if label >= classes {
            return Err(DataError::Format {
                offset: label_at,
                msg: format!("sample {i}: label {label} out of range 0..{classes}"),
            });
        }
        if orig_label >= classes {
            return Err(DataError::Format {
                offset: orig_at,
                msg: format!("sample {i}: orig_label {orig_label} out of range 0..{classes}"),
            });
        }
        if flags & !KNOWN_FLAGS != 0 {
            return Err(DataError::Format {
                offset: flags_at,
                msg: format!("sample {i}: unknown flag bits {flags:#04x}"),
            });
        }
        if pad != 0 {
            return Err(DataError::Format {
                offset: pad_at,
                msg: format!("sample {i}: nonzero pad byte {pad}"),
            });
        }
        let mask_at = r.pos;
        let mask = r.take(hw, "mask")?.to_vec();
        if let Some(j) = mask.iter().position(|&m| m > 1) {
            return Err(DataError::Format {
                offset: mask_at + j,
                msg: format!("sample {i}: mask byte {} outside {{0,1}}", mask[j]),
            });
        }
        let mut pixels = Vec::with_capacity(3 * hw);
        for j in 0..3 * hw {
            let px_at = r.pos;
            let v = r.f32("pixel")?;
            if !(v >= 0.0 && v <= 1.0) {
                return Err(DataError::Format {
                    offset: px_at,
                    msg: format!("sample {i}: pixel {j} value {v} outside [0,1]"),
                });
            }
            pixels.push(v);
        }
        samples.push(SampleRecord {
            pixels,
            mask,
            label,
            orig_label,
            group,
            flags,
        });
    }
    if r.pos != buf.len() {
        return Err(DataError::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes after {n} samples", buf.len() - r.pos),
        });
    }
    DatasetContainer::new(
        classes,
        height,
        width,
        samples,
        format!("loaded from {}", path.display()),
    )
}
