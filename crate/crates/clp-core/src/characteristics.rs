//! Per-sample training characteristics and their running class statistics.
//!
//! Ten numbers summarize how the classifier currently treats one sample:
//!
//! 1. loss, 2. softmax margin `S_y − max_{j≠y} S_j`, 3. ℓ₂ distance between
//! the softmax output and the one-hot target, 4. cosine between the
//! penultimate feature and the final-layer class-y weight vector,
//! 5. prediction entropy in bits, 6. class proportion `N_y/N`, 7. running
//! class-average loss, 8. squared norm of the class-y weight vector,
//! 9. loss minus its class average, 10. margin minus its class average.
//!
//! All values are detached 64-bit host floats: the perturbation network
//! treats them as inputs, never as differentiable functions of the
//! classifier. Counterfactual views ("not class y") evaluate the
//! class-dependent entries at the original label and negate the margin so
//! its monotone meaning survives.
//!
//! [`ClassStats`] holds per-class EMA loss/margin plus the fixed class
//! counts; [`FeatureNormalizer`] z-scores the ten features with running
//! EMA moments and a clamp, which keeps the meta-gradient inputs at a sane
//! scale.

use thiserror::Error;

use crate::tensorad::Tensor;

/// Width of a characteristic vector.
pub const NUM_CHARACTERISTICS: usize = 10;

/// Default EMA momentum for class statistics.
pub const CLASS_STATS_BETA: f64 = 0.9;
/// Default EMA momentum for feature normalization.
pub const NORMALIZER_BETA: f64 = 0.99;
/// Default clamp bound for normalized features.
pub const NORMALIZER_KAPPA: f64 = 5.0;
/// Std floor used when z-scoring.
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CharError {
    #[error("characteristics contract: {0}")]
    Contract(String),
    #[error("characteristics numeric: {0}")]
    Numeric(String),
}

pub type CharResult<T> = Result<T, CharError>;

/// Ten finite floats, 1-indexed by convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CharVector {
    g: [f64; NUM_CHARACTERISTICS],
    /// Set when g4 was forced to 0 by a zero feature or weight vector.
    pub g4_degenerate: bool,
}

impl CharVector {
    pub fn from_array(g: [f64; NUM_CHARACTERISTICS]) -> Self {
        Self {
            g,
            g4_degenerate: false,
        }
    }

    /// 1-based accessor matching the table numbering.
    pub fn g(&self, index: usize) -> f64 {
        assert!(
            (1..=NUM_CHARACTERISTICS).contains(&index),
            "characteristic index {index} outside 1..={NUM_CHARACTERISTICS}"
        );
        self.g[index - 1]
    }

    pub fn as_array(&self) -> [f64; NUM_CHARACTERISTICS] {
        self.g
    }

    pub fn all_finite(&self) -> bool {
        self.g.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax of a logit slice.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Fixed class counts plus per-class EMA loss and margin. Counts come from
/// the training container (so `g6 = N_y/N` reflects the dataset); the EMAs
/// advance once per batch via [`ClassStats::update`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    counts: Vec<u64>,
    total: u64,
    ema_loss: Vec<Option<f64>>,
    ema_margin: Vec<Option<f64>>,
    beta: f64,
}

impl ClassStats {
    pub fn new(class_counts: &[usize], beta: f64) -> CharResult<Self> {
        if class_counts.len() < 2 {
            return Err(CharError::Contract(format!(
                "class table needs ≥ 2 classes, got {}",
                class_counts.len()
            )));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(CharError::Contract(format!(
                "stats momentum must be in [0,1), got {beta}"
            )));
        }
        let counts: Vec<u64> = class_counts.iter().map(|&c| c as u64).collect();
        let total = counts.iter().sum();
        Ok(Self {
            ema_loss: vec![None; counts.len()],
            ema_margin: vec![None; counts.len()],
            counts,
            total,
            beta,
        })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, y: usize) -> u64 {
        self.counts[y]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn ema_loss(&self, y: usize) -> Option<f64> {
        self.ema_loss[y]
    }

    pub fn ema_margin(&self, y: usize) -> Option<f64> {
        self.ema_margin[y]
    }

    /// Folds one batch of per-sample (label, loss, margin) observations into
    /// the EMAs: classes present move by `β·ema + (1−β)·batch_mean`, a first
    /// observation initializes the EMA to the batch mean, absent classes are
    /// untouched.
    pub fn update(&mut self, batch: &[(usize, f64, f64)]) -> CharResult<()> {
        let c = self.counts.len();
        let mut sums = vec![(0u32, 0.0f64, 0.0f64); c];
        for &(y, loss, margin) in batch {
            if y >= c {
                return Err(CharError::Contract(format!(
                    "label {y} outside the {c}-class table"
                )));
            }
            if !(loss.is_finite() && margin.is_finite()) {
                return Err(CharError::Numeric(format!(
                    "non-finite observation for class {y}: loss {loss}, margin {margin}"
                )));
            }
            let e = &mut sums[y];
            e.0 += 1;
            e.1 += loss;
            e.2 += margin;
        }
        for (y, (n, loss_sum, margin_sum)) in sums.into_iter().enumerate() {
            if n == 0 {
                continue;
            }
            let (lm, mm) = (loss_sum / n as f64, margin_sum / n as f64);
            self.ema_loss[y] = Some(match self.ema_loss[y] {
                None => lm,
                Some(prev) => self.beta * prev + (1.0 - self.beta) * lm,
            });
            self.ema_margin[y] = Some(match self.ema_margin[y] {
                None => mm,
                Some(prev) => self.beta * prev + (1.0 - self.beta) * mm,
            });
        }
        Ok(())
    }

    /// Raw state in a fixed layout for checkpointing:
    /// `[beta, count_0.., ema_loss_0.., ema_margin_0..]` with NaN encoding an
    /// uninitialized EMA.
    pub fn to_raw(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(1 + 3 * self.counts.len());
        out.push(self.beta);
        out.extend(self.counts.iter().map(|&c| c as f64));
        out.extend(self.ema_loss.iter().map(|e| e.unwrap_or(f64::NAN)));
        out.extend(self.ema_margin.iter().map(|e| e.unwrap_or(f64::NAN)));
        out
    }

    /// Inverse of [`Self::to_raw`].
    pub fn from_raw(raw: &[f64], classes: usize) -> CharResult<Self> {
        if raw.len() != 1 + 3 * classes {
            return Err(CharError::Contract(format!(
                "class stats blob holds {} values, expected {}",
                raw.len(),
                1 + 3 * classes
            )));
        }
        let beta = raw[0];
        if !(0.0..1.0).contains(&beta) {
            return Err(CharError::Contract(format!("bad stats momentum {beta}")));
        }
        let counts: Vec<u64> = raw[1..1 + classes].iter().map(|&v| v as u64).collect();
        let decode = |v: f64| if v.is_nan() { None } else { Some(v) };
        Ok(Self {
            total: counts.iter().sum(),
            counts,
            ema_loss: raw[1 + classes..1 + 2 * classes]
                .iter()
                .map(|&v| decode(v))
                .collect(),
            ema_margin: raw[1 + 2 * classes..]
                .iter()
                .map(|&v| decode(v))
                .collect(),
            beta,
        })
    }
}

/// Extracts the ten characteristics for one sample.
///
/// `logits` are the unperturbed outputs u, `feature` the penultimate
/// activations, `final_weight` the classifier's last weight matrix shaped
/// feature_dim×C (column y is the class-y weight vector). `label` is the
/// effective class — the original label for counterfactual views, whose
/// margin entries are negated.
pub fn extract(
    logits: &[f64],
    feature: &[f64],
    label: usize,
    counterfactual: bool,
    loss: f64,
    final_weight: &Tensor<f64>,
    stats: &ClassStats,
) -> CharResult<CharVector> {
    let c = logits.len();
    if c < 2 {
        return Err(CharError::Contract(format!("need ≥ 2 logits, got {c}")));
    }
    if label >= c || c != stats.classes() {
        return Err(CharError::Contract(format!(
            "label {label} / class table {} incompatible with {c} logits",
            stats.classes()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) || feature.iter().any(|v| !v.is_finite()) {
        return Err(CharError::Numeric("non-finite logits or features".into()));
    }
    if !loss.is_finite() {
        return Err(CharError::Numeric(format!("non-finite loss {loss}")));
    }
    let (fdim, wc) = final_weight.dims2().map_err(|e| {
        CharError::Contract(format!("final weight must be a 2-D matrix: {e}"))
    })?;
    if fdim != feature.len() || wc != c {
        return Err(CharError::Contract(format!(
            "final weight {fdim}×{wc} incompatible with feature {} / classes {c}",
            feature.len()
        )));
    }
    let ell_bar = stats.ema_loss(label).ok_or_else(|| {
        CharError::Contract(format!("class {label} loss statistics uninitialized"))
    })?;
    let gamma_bar = stats.ema_margin(label).ok_or_else(|| {
        CharError::Contract(format!("class {label} margin statistics uninitialized"))
    })?;

    let s = softmax(logits);
    let max_other = s
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw_margin = s[label] - max_other;
    let g2 = if counterfactual { -raw_margin } else { raw_margin };

    let g3 = s
        .iter()
        .enumerate()
        .map(|(j, &sj)| {
            let t = if j == label { 1.0 } else { 0.0 };
            (t - sj) * (t - sj)
        })
        .sum::<f64>()
        .sqrt();

    let mut dot = 0.0;
    let mut w_norm2 = 0.0;
    for (i, &fi) in feature.iter().enumerate() {
        let wi = final_weight.get2(i, label);
        dot += fi * wi;
        w_norm2 += wi * wi;
    }
    let f_norm2: f64 = feature.iter().map(|v| v * v).sum();
    let degenerate = f_norm2 == 0.0 || w_norm2 == 0.0;
    let g4 = if degenerate {
        0.0
    } else {
        (dot / (f_norm2.sqrt() * w_norm2.sqrt())).clamp(-1.0, 1.0)
    };

    let g5 = s
        .iter()
        .filter(|&&sj| sj > 0.0)
        .map(|&sj| -sj * sj.log2())
        .sum::<f64>();

    let g6 = stats.count(label) as f64 / stats.total() as f64;
    let cv = CharVector {
        g: [
            loss,
            g2,
            g3,
            g4,
            g5,
            g6,
            ell_bar,
            w_norm2,
            loss - ell_bar,
            g2 - gamma_bar,
        ],
        g4_degenerate: degenerate,
    };
    if !cv.all_finite() {
        return Err(CharError::Numeric(format!(
            "non-finite characteristic in {:?}",
            cv.g
        )));
    }
    Ok(cv)
}

/// Running per-feature EMA mean/variance with a z-score + clamp transform.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNormalizer {
    mean: [f64; NUM_CHARACTERISTICS],
    var: [f64; NUM_CHARACTERISTICS],
    initialized: bool,
    beta: f64,
    kappa: f64,
}

impl FeatureNormalizer {
    pub fn new(beta: f64, kappa: f64) -> CharResult<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(CharError::Contract(format!(
                "normalizer momentum must be in [0,1), got {beta}"
            )));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(CharError::Contract(format!(
                "clamp bound must be positive, got {kappa}"
            )));
        }
        Ok(Self {
            mean: [0.0; NUM_CHARACTERISTICS],
            var: [0.0; NUM_CHARACTERISTICS],
            initialized: false,
            beta,
            kappa,
        })
    }

    pub fn standard() -> Self {
        Self::new(NORMALIZER_BETA, NORMALIZER_KAPPA).expect("default constants valid")
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Folds one observation into the running moments. The first observation
    /// initializes mean = cv, var = 0.
    pub fn update(&mut self, cv: &CharVector) {
        if !self.initialized {
            self.mean = cv.g;
            self.var = [0.0; NUM_CHARACTERISTICS];
            self.initialized = true;
            return;
        }
        for i in 0..NUM_CHARACTERISTICS {
            let x = cv.g[i];
            self.mean[i] = self.beta * self.mean[i] + (1.0 - self.beta) * x;
            let d = x - self.mean[i];
            self.var[i] = self.beta * self.var[i] + (1.0 - self.beta) * d * d;
        }
    }

    /// Pure z-score + clamp against the current moments.
    pub fn transform(&self, cv: &CharVector) -> CharResult<CharVector> {
        if !self.initialized {
            return Err(CharError::Contract(
                "normalizer used before any update".into(),
            ));
        }
        let mut g = [0.0; NUM_CHARACTERISTICS];
        for i in 0..NUM_CHARACTERISTICS {
            let std = self.var[i].sqrt().max(STD_FLOOR);
            g[i] = ((cv.g[i] - self.mean[i]) / std).clamp(-self.kappa, self.kappa);
        }
        Ok(CharVector {
            g,
            g4_degenerate: cv.g4_degenerate,
        })
    }

    /// Update-then-transform, the streaming path used on training batches.
    pub fn normalize(&mut self, cv: &CharVector) -> CharVector {
        self.update(cv);
        self.transform(cv).expect("just initialized")
    }

    /// Raw state in a fixed layout for checkpointing:
    /// `[beta, kappa, initialized, mean.., var..]`.
    pub fn to_raw(&self) -> Vec<f64> {
        let mut out = vec![
            self.beta,
            self.kappa,
            if self.initialized { 1.0 } else { 0.0 },
        ];
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.var);
        out
    }

    /// Inverse of [`Self::to_raw`].
    pub fn from_raw(raw: &[f64]) -> CharResult<Self> {
        if raw.len() != 3 + 2 * NUM_CHARACTERISTICS {
            return Err(CharError::Contract(format!(
                "normalizer blob holds {} values, expected {}",
                raw.len(),
                3 + 2 * NUM_CHARACTERISTICS
            )));
        }
        let mut norm = Self::new(raw[0], raw[1])?;
        norm.initialized = raw[2] != 0.0;
        norm.mean.copy_from_slice(&raw[3..3 + NUM_CHARACTERISTICS]);
        norm.var.copy_from_slice(&raw[3 + NUM_CHARACTERISTICS..]);
        if norm.var.iter().any(|&v| v < 0.0) {
            return Err(CharError::Contract("negative variance in blob".into()));
        }
        Ok(norm)
    }
}
