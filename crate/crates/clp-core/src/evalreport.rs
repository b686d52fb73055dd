//! Evaluation and reporting: top-1 / per-class / macro-precision /
//! worst-group metrics, the perturbation loss-increase diagnostic, input-
//! gradient saliency maps, and file emission (metrics JSON, history CSVs,
//! portable graymaps).
//!
//! Evaluation always runs on unperturbed logits — the logit perturbation is
//! a training-time device — and always scores predictions against
//! `orig_label`, so label-noised containers are graded on clean truth.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::{ClassStats, FeatureNormalizer};
use crate::metatrain::{
    cv_tensor, gather_batch, loss_and_margin, raw_characteristics, TrainError, TrainHistory,
};
use crate::models::{Mlp, ModelError, PerturbNet};
use crate::scalar::{upcast, Scalar};
use crate::synthdata::DatasetContainer;
use crate::tensorad::{AdError, Tensor};
use crate::util::atomic_write;

/// Evaluation batch size; evaluation is read-only so chunking is purely a
/// memory bound.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report encoding: {0}")]
    Json(#[from] serde_json::Error),
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Accuracy of one sample group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub id: u16,
    pub n: usize,
    pub acc: f64,
}

/// Classification metrics over one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1_acc: f64,
    pub top1_err: f64,
    pub per_class_acc: Vec<f64>,
    pub macro_precision: f64,
    pub worst_group_acc: f64,
    pub groups: Vec<GroupStat>,
    pub n_eval: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> EvalResult<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> EvalResult<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Index of the row maximum, lowest index on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Scores `model` on `ds`: top-1 and per-class accuracy against
/// `orig_label`, macro precision (classes never predicted contribute 0),
/// and per-group / worst-group accuracy.
pub fn evaluate<F: Scalar>(model: &Mlp<F>, ds: &DatasetContainer) -> EvalResult<MetricsReport> {
    let n = ds.samples().len();
    if n == 0 {
        return Err(EvalError::Contract("cannot evaluate an empty dataset".into()));
    }
    let classes = ds.classes();

    let mut class_total = vec![0usize; classes];
    let mut class_hit = vec![0usize; classes];
    let mut pred_total = vec![0usize; classes];
    let mut pred_hit = vec![0usize; classes];
    // group id → (n, hits); kept sorted by id at the end
    let mut group_counts: std::collections::BTreeMap<u16, (usize, usize)> =
        std::collections::BTreeMap::new();
    let mut hits = 0usize;

    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idxs: Vec<usize> = (start..end).collect();
        let batch = gather_batch::<F>(ds, &idxs)?;
        let (_feat, logits) = model.forward_values(&batch.x)?;
        for (k, &i) in idxs.iter().enumerate() {
            let row: Vec<f64> = logits.data()[k * classes..(k + 1) * classes]
                .iter()
                .map(|&v| upcast(v))
                .collect();
            let pred = argmax(&row);
            let truth = ds.samples()[i].orig_label as usize;
            let group = ds.samples()[i].group;
            let correct = pred == truth;
            class_total[truth] += 1;
            pred_total[pred] += 1;
            if correct {
                hits += 1;
                class_hit[truth] += 1;
                pred_hit[pred] += 1;
            }
            let e = group_counts.entry(group).or_insert((0, 0));
            e.0 += 1;
            e.1 += usize::from(correct);
        }
        start = end;
    }

    let top1_acc = hits as f64 / n as f64;
    let per_class_acc: Vec<f64> = class_total
        .iter()
        .zip(&class_hit)
        .map(|(&t, &h)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    let macro_precision = pred_total
        .iter()
        .zip(&pred_hit)
        .map(|(&t, &h)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .sum::<f64>()
        / classes as f64;
    let groups: Vec<GroupStat> = group_counts
        .into_iter()
        .map(|(id, (gn, gh))| GroupStat {
            id,
            n: gn,
            acc: gh as f64 / gn as f64,
        })
        .collect();
    let worst_group_acc = groups
        .iter()
        .map(|g| g.acc)
        .fold(f64::INFINITY, f64::min);

    Ok(MetricsReport {
        top1_acc,
        top1_err: 1.0 - top1_acc,
        per_class_acc,
        macro_precision,
        worst_group_acc,
        groups,
        n_eval: n,
    })
}

/// Fractions of clean and of noise-flagged samples whose per-sample loss
/// strictly increases when the trained perturbation is applied to the
/// logits. A bucket with no samples reports `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossIncreaseReport {
    pub clean_fraction: Option<f64>,
    pub noisy_fraction: Option<f64>,
    pub n_clean: usize,
    pub n_noisy: usize,
}

/// Compares per-sample loss before and after the logit perturbation, using
/// the same characteristic plumbing as training (statistics and normalizer
/// are read-only here).
pub fn loss_increase_fractions<F: Scalar>(
    model: &Mlp<F>,
    pnet: &PerturbNet<F>,
    stats: &ClassStats,
    normalizer: &FeatureNormalizer,
    ds: &DatasetContainer,
) -> EvalResult<LossIncreaseReport> {
    let n = ds.samples().len();
    if n == 0 {
        return Err(EvalError::Contract(
            "cannot run the loss diagnostic on an empty dataset".into(),
        ));
    }
    let classes = ds.classes();

    let mut n_clean = 0usize;
    let mut n_noisy = 0usize;
    let mut up_clean = 0usize;
    let mut up_noisy = 0usize;

    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idxs: Vec<usize> = (start..end).collect();
        let batch = gather_batch::<F>(ds, &idxs)?;
        let (feat, logits) = model.forward_values(&batch.x)?;
        let (raw, _obs) = raw_characteristics(
            &logits,
            &feat,
            model.final_weight(),
            &batch.labels,
            &batch.cf,
            stats,
        )?;
        let mut normed = Vec::with_capacity(raw.len());
        for r in &raw {
            normed.push(
                normalizer
                    .transform(r)
                    .map_err(|e| EvalError::Contract(e.to_string()))?,
            );
        }
        let cv: Tensor<F> = cv_tensor(&normed)?;
        let delta = pnet.forward_values(&cv)?;
        for (k, &i) in idxs.iter().enumerate() {
            let u: Vec<f64> = logits.data()[k * classes..(k + 1) * classes]
                .iter()
                .map(|&v| upcast(v))
                .collect();
            let d: Vec<f64> = delta.data()[k * classes..(k + 1) * classes]
                .iter()
                .map(|&v| upcast(v))
                .collect();
            let perturbed: Vec<f64> = u.iter().zip(&d).map(|(&a, &b)| a + b).collect();
            let label = batch.labels[k];
            let cf = batch.cf[k];
            let (before, _) = loss_and_margin(&u, label, cf);
            let (after, _) = loss_and_margin(&perturbed, label, cf);
            let increased = after > before;
            if ds.samples()[i].is_noised() {
                n_noisy += 1;
                up_noisy += usize::from(increased);
            } else {
                n_clean += 1;
                up_clean += usize::from(increased);
            }
        }
        start = end;
    }

    let frac = |up: usize, total: usize| {
        if total == 0 {
            None
        } else {
            Some(up as f64 / total as f64)
        }
    };
    Ok(LossIncreaseReport {
        clean_fraction: frac(up_clean, n_clean),
        noisy_fraction: frac(up_noisy, n_noisy),
        n_clean,
        n_noisy,
    })
}

/// A grayscale H×W map with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Binary portable graymap bytes (8-bit, maxval 255).
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }

    pub fn write_pgm(&self, path: &Path) -> std::io::Result<()> {
        atomic_write(path, &self.to_pgm_bytes())
    }
}

/// Per-pixel channel-summed squared input gradient of the model's
/// probability for the sample's true class, min-max normalized to [0, 1].
/// A constant map (e.g. from a constant classifier) stays all-zero.
pub fn saliency_map<F: Scalar>(
    model: &Mlp<F>,
    ds: &DatasetContainer,
    index: usize,
) -> EvalResult<SaliencyMap> {
    let n = ds.samples().len();
    if index >= n {
        return Err(EvalError::Contract(format!(
            "saliency sample index {index} out of range; valid range is 0..{n}"
        )));
    }
    let h = ds.height() as usize;
    let w = ds.width() as usize;
    let hw = h * w;
    let sample = &ds.samples()[index];
    let label = sample.orig_label as usize;

    let batch = gather_batch::<F>(ds, &[index])?;
    let mut g = crate::tensorad::Graph::<F>::new();
    let params = model.bind_frozen(&mut g)?;
    let x = g.leaf(batch.x.clone(), true)?;
    let (_feat, logits) = model.forward(&mut g, &params, x)?;
    let probs = g.softmax(logits)?;
    let py = g.row_gather(probs, &[label])?;
    let objective = g.sum(py)?;
    let grads = g.backward(objective, &[x], false)?;
    let grad = g.value(grads[0]);

    let mut values = vec![0.0f64; hw];
    for p in 0..hw {
        let mut acc = 0.0;
        for ch in 0..3 {
            let v = upcast(grad.data()[ch * hw + p]);
            acc += v * v;
        }
        values[p] = acc;
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in &mut values {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(SaliencyMap {
        height: h,
        width: w,
        values,
    })
}

/// Writes `<prefix>.metrics.json`, `<prefix>.steps.csv`,
/// `<prefix>.epochs.csv`, and one `<prefix>.saliency-<i>.pgm` per map.
/// Overwrites are atomic and idempotent; returns the paths written.
pub fn report_emit(
    report: &MetricsReport,
    history: &TrainHistory,
    saliency: &[(usize, SaliencyMap)],
    path_prefix: &Path,
) -> EvalResult<Vec<PathBuf>> {
    if let Some(dir) = path_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let stem = path_prefix.display().to_string();
    let mut written = Vec::new();

    let metrics_path = PathBuf::from(format!("{stem}.metrics.json"));
    atomic_write(&metrics_path, report.to_json()?.as_bytes())?;
    written.push(metrics_path);

    let steps_path = PathBuf::from(format!("{stem}.steps.csv"));
    atomic_write(&steps_path, history.steps_csv().as_bytes())?;
    written.push(steps_path);

    let epochs_path = PathBuf::from(format!("{stem}.epochs.csv"));
    atomic_write(&epochs_path, history.epochs_csv().as_bytes())?;
    written.push(epochs_path);

    for (index, map) in saliency {
        let p = PathBuf::from(format!("{stem}.saliency-{index}.pgm"));
        map.write_pgm(&p)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::CharVector;
    use crate::synthdata::{SampleRecord, FLAG_NOISED};
    use crate::tensorad::Tensor;

    /// 1×1 three-channel images: pixel channels spell out the class.
    fn separable_container(per_class: usize) -> DatasetContainer {
        let mut samples = Vec::new();
        for k in 0..3u16 {
            for i in 0..per_class {
                let mut pixels = vec![0.1f32; 3];
                pixels[k as usize] = 0.8 + 0.05 * (i % 2) as f32;
                samples.push(SampleRecord {
                    pixels,
                    mask: vec![1],
                    label: k,
                    orig_label: k,
                    group: k,
                    flags: 0,
                });
            }
        }
        DatasetContainer::new(3, 1, 1, samples, "separable".into()).unwrap()
    }

    /// Linear 3→C model with the given flat weight matrix and zero bias.
    fn linear_model(weights: Vec<f64>, input_dim: usize, classes: usize) -> Mlp<f64> {
        let mut m = Mlp::<f64>::init(input_dim, &[], classes, 0).unwrap();
        let w = Tensor::from_vec(vec![input_dim, classes], weights).unwrap();
        let b = Tensor::from_vec(vec![1, classes], vec![0.0; classes]).unwrap();
        m.set_layer_tensors(vec![(w, b)]).unwrap();
        m
    }

    fn identity3() -> Vec<f64> {
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
    }

    #[test]
    fn perfect_predictor_scores_ones() {
        let ds = separable_container(2);
        let m = linear_model(identity3(), 3, 3);
        let r = evaluate(&m, &ds).unwrap();
        assert_eq!(r.top1_acc, 1.0);
        assert_eq!(r.top1_err, 0.0);
        assert_eq!(r.per_class_acc, vec![1.0, 1.0, 1.0]);
        assert_eq!(r.macro_precision, 1.0);
        assert_eq!(r.worst_group_acc, 1.0);
        assert_eq!(r.n_eval, 6);
        assert_eq!(r.groups.len(), 3);
        assert!(r.groups.iter().all(|g| g.acc == 1.0 && g.n == 2));
    }

    #[test]
    fn constant_predictor_on_balanced_four_classes() {
        // zero weights → all logits tie → argmax picks class 0
        let mut samples = Vec::new();
        for k in 0..4u16 {
            for i in 0..3usize {
                samples.push(SampleRecord {
                    pixels: vec![0.2 + 0.1 * i as f32; 3],
                    mask: vec![1],
                    label: k,
                    orig_label: k,
                    group: k,
                    flags: 0,
                });
            }
        }
        let ds = DatasetContainer::new(4, 1, 1, samples, "balanced".into()).unwrap();
        let m = linear_model(vec![0.0; 12], 3, 4);
        let r = evaluate(&m, &ds).unwrap();
        assert_eq!(r.top1_acc, 0.25);
        assert_eq!(r.top1_err, 0.75);
        assert_eq!(r.per_class_acc, vec![1.0, 0.0, 0.0, 0.0]);
        // only class 0 is ever predicted, with precision 3/12
        assert_eq!(r.macro_precision, 0.0625);
        assert_eq!(r.worst_group_acc, 0.0);
    }

    #[test]
    fn weighted_per_class_accuracy_reconstructs_top1() {
        let ds = crate::synthdata::synth_spurshapes(3, 3, 16, 16, 20, 0.6, 5).unwrap();
        let m = Mlp::<f64>::init(ds.pixel_dim(), &[8], 3, 9).unwrap();
        let r = evaluate(&m, &ds).unwrap();
        let n = r.n_eval as f64;
        let weighted: f64 = r
            .per_class_acc
            .iter()
            .zip(ds.class_counts())
            .map(|(&a, &c)| a * c as f64 / n)
            .sum();
        assert!((weighted - r.top1_acc).abs() < 1e-12);
        assert!(r.worst_group_acc <= r.top1_acc + 1e-15);
        assert!(r.top1_acc >= 0.0 && r.top1_acc <= 1.0);
        assert!(r.macro_precision >= 0.0 && r.macro_precision <= 1.0);
    }

    #[test]
    fn empty_dataset_refused() {
        let ds = DatasetContainer::new(2, 1, 1, Vec::new(), "empty".into()).unwrap();
        let m = linear_model(vec![0.0; 6], 3, 2);
        let err = evaluate(&m, &ds).unwrap_err();
        assert!(matches!(err, EvalError::Contract(_)));
    }

    /// Stats with one observation per class and an initialized normalizer.
    fn dressed_state(counts: &[usize]) -> (ClassStats, FeatureNormalizer) {
        let mut stats =
            ClassStats::new(counts, crate::characteristics::CLASS_STATS_BETA).unwrap();
        let obs: Vec<(usize, f64, f64)> = (0..counts.len())
            .map(|k| (k, 0.9 + 0.1 * k as f64, 0.05 * k as f64))
            .collect();
        stats.update(&obs).unwrap();
        let mut norm = FeatureNormalizer::standard();
        for phase in 0..5 {
            let mut arr = [0.0; 10];
            for (i, a) in arr.iter_mut().enumerate() {
                *a = ((i * 3 + phase) % 7) as f64 * 0.3 - 0.8;
            }
            norm.update(&CharVector::from_array(arr));
        }
        (stats, norm)
    }

    fn noised_container() -> DatasetContainer {
        let mut ds = separable_container(3);
        let mut samples = ds.samples().to_vec();
        samples[1].flags |= FLAG_NOISED;
        samples[4].flags |= FLAG_NOISED;
        ds = DatasetContainer::new(3, 1, 1, samples, "noised".into()).unwrap();
        ds
    }

    #[test]
    fn zero_perturbation_never_increases_loss() {
        let ds = noised_container();
        let m = linear_model(identity3(), 3, 3);
        let pnet = PerturbNet::<f64>::init(3, 4, 3).unwrap(); // zero output layer
        let (stats, norm) = dressed_state(ds.class_counts());
        let r = loss_increase_fractions(&m, &pnet, &stats, &norm, &ds).unwrap();
        assert_eq!(r.clean_fraction, Some(0.0));
        assert_eq!(r.noisy_fraction, Some(0.0));
        assert_eq!(r.n_clean + r.n_noisy, 9);
        assert_eq!(r.n_noisy, 2);
    }

    /// Perturbation net that always emits a fixed bias row.
    fn constant_delta_pnet(classes: usize, bias: Vec<f64>) -> PerturbNet<f64> {
        let mut pnet = PerturbNet::<f64>::init(classes, 4, 3).unwrap();
        let layers: Vec<(Tensor<f64>, Tensor<f64>)> = pnet
            .layer_tensors()
            .map(|(w, b)| (w.clone(), b.clone()))
            .collect();
        let zero_w = Tensor::from_vec(
            layers[1].0.shape().to_vec(),
            vec![0.0; layers[1].0.numel()],
        )
        .unwrap();
        let b = Tensor::from_vec(vec![1, classes], bias).unwrap();
        pnet.set_layer_tensors(vec![layers[0].clone(), (zero_w, b)])
            .unwrap();
        pnet
    }

    #[test]
    fn boosting_the_true_logit_decreases_every_loss() {
        // single populated class, huge positive delta on its own logit
        let mut samples = Vec::new();
        for i in 0..4usize {
            samples.push(SampleRecord {
                pixels: vec![0.3 + 0.1 * i as f32, 0.5, 0.2],
                mask: vec![1],
                label: 0,
                orig_label: 0,
                group: 0,
                flags: if i == 3 { FLAG_NOISED } else { 0 },
            });
        }
        let ds = DatasetContainer::new(2, 1, 1, samples, "one class".into()).unwrap();
        let m = linear_model(vec![0.4, -0.2, 0.1, 0.3, -0.5, 0.2], 3, 2);
        let mut stats =
            ClassStats::new(ds.class_counts(), crate::characteristics::CLASS_STATS_BETA)
                .unwrap();
        stats.update(&[(0, 1.0, 0.1)]).unwrap();
        let mut norm = FeatureNormalizer::standard();
        norm.update(&CharVector::from_array([0.5; 10]));
        norm.update(&CharVector::from_array([-0.5; 10]));

        let boost = constant_delta_pnet(2, vec![1e6, 0.0]);
        let r = loss_increase_fractions(&m, &boost, &stats, &norm, &ds).unwrap();
        assert_eq!(r.clean_fraction, Some(0.0));
        assert_eq!(r.noisy_fraction, Some(0.0));

        // and the mirror image: punishing the true logit raises every loss
        let punish = constant_delta_pnet(2, vec![-5.0, 0.0]);
        let r = loss_increase_fractions(&m, &punish, &stats, &norm, &ds).unwrap();
        assert_eq!(r.clean_fraction, Some(1.0));
        assert_eq!(r.noisy_fraction, Some(1.0));
    }

    #[test]
    fn loss_fractions_ignore_sample_order() {
        let ds = noised_container();
        let m = linear_model(identity3(), 3, 3);
        // non-trivial perturbation so some losses move either way
        let pnet = constant_delta_pnet(3, vec![0.4, -0.3, 0.2]);
        let (stats, norm) = dressed_state(ds.class_counts());
        let base = loss_increase_fractions(&m, &pnet, &stats, &norm, &ds).unwrap();

        let mut shuffled = ds.samples().to_vec();
        shuffled.reverse();
        shuffled.swap(0, 4);
        let ds2 = DatasetContainer::new(3, 1, 1, shuffled, "permuted".into()).unwrap();
        let permuted = loss_increase_fractions(&m, &pnet, &stats, &norm, &ds2).unwrap();
        assert_eq!(base.clean_fraction, permuted.clean_fraction);
        assert_eq!(base.noisy_fraction, permuted.noisy_fraction);
    }

    #[test]
    fn absent_noise_bucket_reports_none() {
        let ds = separable_container(2);
        let m = linear_model(identity3(), 3, 3);
        let pnet = PerturbNet::<f64>::init(3, 4, 3).unwrap();
        let (stats, norm) = dressed_state(ds.class_counts());
        let r = loss_increase_fractions(&m, &pnet, &stats, &norm, &ds).unwrap();
        assert_eq!(r.noisy_fraction, None);
        assert_eq!(r.clean_fraction, Some(0.0));
        assert_eq!(r.n_noisy, 0);
    }

    /// 1×2 images; mask marks pixel 0. Weights touch only selected pixels.
    fn two_pixel_container() -> DatasetContainer {
        let samples = vec![
            SampleRecord {
                pixels: vec![0.8, 0.3, 0.6, 0.2, 0.7, 0.4],
                mask: vec![1, 0],
                label: 0,
                orig_label: 0,
                group: 0,
                flags: 0,
            },
            SampleRecord {
                pixels: vec![0.2, 0.9, 0.3, 0.8, 0.1, 0.6],
                mask: vec![1, 0],
                label: 1,
                orig_label: 1,
                group: 1,
                flags: 0,
            },
        ];
        DatasetContainer::new(2, 1, 2, samples, "two pixels".into()).unwrap()
    }

    #[test]
    fn zero_background_weights_give_zero_background_saliency() {
        // channel-planar rows: pixel 0 lives at rows 0, 2, 4; pixel 1 at 1, 3, 5
        let ds = two_pixel_container();
        let mut w = vec![0.0; 12];
        for ch in 0..3 {
            w[(2 * ch) * 2] = 0.9 - 0.2 * ch as f64;
            w[(2 * ch) * 2 + 1] = -0.7 + 0.3 * ch as f64;
        }
        let m = linear_model(w, 6, 2);
        let map = saliency_map(&m, &ds, 0).unwrap();
        assert_eq!((map.height(), map.width()), (1, 2));
        assert_eq!(map.values()[1], 0.0);
        assert_eq!(map.values()[0], 1.0);
    }

    #[test]
    fn saliency_is_invariant_to_logit_shifts() {
        let ds = two_pixel_container();
        let m = Mlp::<f64>::init(6, &[5], 2, 17).unwrap();
        let base = saliency_map(&m, &ds, 1).unwrap();

        let mut shifted = m.clone();
        let mut layers: Vec<(Tensor<f64>, Tensor<f64>)> = shifted
            .layer_tensors()
            .map(|(w, b)| (w.clone(), b.clone()))
            .collect();
        let last = layers.len() - 1;
        for v in layers[last].1.data_mut() {
            *v += 37.25;
        }
        shifted.set_layer_tensors(layers).unwrap();
        let moved = saliency_map(&shifted, &ds, 1).unwrap();

        for (a, b) in base.values().iter().zip(moved.values()) {
            assert!((a - b).abs() < 1e-9, "shift broke saliency: {a} vs {b}");
        }
    }

    #[test]
    fn constant_classifier_yields_all_zero_map() {
        let ds = two_pixel_container();
        let m = linear_model(vec![0.0; 12], 6, 2);
        let map = saliency_map(&m, &ds, 0).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saliency_values_stay_in_unit_interval() {
        let ds = crate::synthdata::synth_spurshapes(2, 2, 16, 16, 5, 0.5, 13).unwrap();
        let m = Mlp::<f64>::init(ds.pixel_dim(), &[7], 2, 23).unwrap();
        let map = saliency_map(&m, &ds, 3).unwrap();
        assert!(map.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let hi = map.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = map.values().iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(hi, 1.0);
        assert_eq!(lo, 0.0);
    }

    #[test]
    fn saliency_index_out_of_range_names_valid_range() {
        let ds = two_pixel_container();
        let m = linear_model(vec![0.0; 12], 6, 2);
        let err = saliency_map(&m, &ds, 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("7"), "{msg}");
        assert!(msg.contains("0..2"), "{msg}");
    }

    #[test]
    fn pgm_bytes_are_exact() {
        let map = SaliencyMap {
            height: 1,
            width: 3,
            values: vec![0.0, 0.5, 1.0],
        };
        let bytes = map.to_pgm_bytes();
        assert_eq!(&bytes[..9], b"P5\n3 1\n25");
        assert_eq!(bytes[bytes.len() - 3..], [0u8, 128, 255]);
        assert_eq!(bytes.len(), "P5\n3 1\n255\n".len() + 3);
    }

    #[test]
    fn report_emit_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("run-a").join("clp");
        let report = MetricsReport {
            top1_acc: 0.875,
            top1_err: 0.125,
            per_class_acc: vec![1.0, 0.75],
            macro_precision: 0.8125,
            worst_group_acc: 0.5,
            groups: vec![
                GroupStat {
                    id: 0,
                    n: 4,
                    acc: 1.0,
                },
                GroupStat {
                    id: 1,
                    n: 4,
                    acc: 0.5,
                },
            ],
            n_eval: 8,
        };
        let history = TrainHistory::default();
        let map = SaliencyMap {
            height: 1,
            width: 2,
            values: vec![0.0, 1.0],
        };
        let written =
            report_emit(&report, &history, &[(5, map.clone())], &prefix).unwrap();
        assert_eq!(written.len(), 4);

        let json = std::fs::read_to_string(&written[0]).unwrap();
        assert_eq!(MetricsReport::from_json(&json).unwrap(), report);
        let steps = std::fs::read_to_string(&written[1]).unwrap();
        assert_eq!(steps, "iter,train_loss,meta_loss\n");
        let pgm = std::fs::read(&written[3]).unwrap();
        assert_eq!(pgm, map.to_pgm_bytes());

        // idempotent overwrite, byte-identical
        report_emit(&report, &history, &[(5, map)], &prefix).unwrap();
        assert_eq!(std::fs::read_to_string(&written[0]).unwrap(), json);
    }
}
