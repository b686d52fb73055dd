//! Run configuration: sectioned `key = value` text (TOML) with a strict
//! schema — unknown keys are rejected, every random process takes an
//! explicit seed, and the parsed form can be echoed back out verbatim for
//! provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causalaug::{AugmentPlan, FgsmTarget, InfillMethod, DEFAULT_EPSILON};
use crate::metatrain::{TrainConfig, DEFAULT_LAMBDA};
use crate::synthdata::{BiasSpec, NoiseKind};

/// Perturbation-net hidden width when the config does not override it.
pub const DEFAULT_PNET_HIDDEN: usize = 100;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config echo: {0}")]
    Emit(#[from] toml::ser::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
}

pub type ConfigResult<T> = Result<T, ConfigError>;

/// Which augmented views the metadata plan produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentSelect {
    /// Counterfactual and factual views, 1:1.
    #[serde(rename = "cf+f")]
    Both,
    #[serde(rename = "cf")]
    CounterfactualOnly,
    #[serde(rename = "f")]
    FactualOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    #[serde(default = "default_backgrounds")]
    pub backgrounds: usize,
    pub height: usize,
    pub width: usize,
    pub n_per_class: usize,
    #[serde(default)]
    pub spuriousness: f64,
    #[serde(default = "default_imbalance")]
    pub imbalance_ratio: f64,
    #[serde(default = "default_noise_kind")]
    pub noise_kind: NoiseKind,
    #[serde(default)]
    pub noise_ratio: f64,
    pub meta_per_class: usize,
    pub seed: u64,
}

fn default_backgrounds() -> usize {
    2
}

fn default_imbalance() -> f64 {
    1.0
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "default_augment_mode")]
    pub mode: AugmentSelect,
    #[serde(default = "default_cf_method")]
    pub cf_method: InfillMethod,
    #[serde(default = "default_f_method")]
    pub f_method: InfillMethod,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_fgsm_target")]
    pub fgsm_target: FgsmTarget,
    pub seed: u64,
}

fn default_augment_mode() -> AugmentSelect {
    AugmentSelect::Both
}

fn default_cf_method() -> InfillMethod {
    InfillMethod::Grey
}

fn default_f_method() -> InfillMethod {
    InfillMethod::Random
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_fgsm_target() -> FgsmTarget {
    FgsmTarget::RandomOtherClass
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_pnet_hidden")]
    pub pnet_hidden: usize,
    pub init_seed: u64,
}

fn default_pnet_hidden() -> usize {
    DEFAULT_PNET_HIDDEN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub eta1: f64,
    pub eta2: f64,
    pub batch_n: usize,
    pub batch_m: usize,
    pub iters: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub detach_saliency: bool,
    pub seed: u64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Test-set sample indices whose saliency maps the eval command exports.
    #[serde(default)]
    pub saliency_indices: Vec<usize>,
    /// Also run the perturbation loss-increase diagnostic on the train set.
    #[serde(default)]
    pub loss_diagnostic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: String,
    pub run_name: String,
    pub data: DataSection,
    pub augment: AugmentSection,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> ConfigResult<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> ConfigResult<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes back to TOML for the provenance echo.
    pub fn to_toml_string(&self) -> ConfigResult<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Range checks with `section.key` paths in every message.
    pub fn validate(&self) -> ConfigResult<()> {
        let d = &self.data;
        if d.classes < 2 {
            return Err(invalid("data.classes", "must be ≥ 2"));
        }
        if d.backgrounds < 2 {
            return Err(invalid("data.backgrounds", "must be ≥ 2"));
        }
        if d.height < 16 || d.width < 16 {
            return Err(invalid("data.height/data.width", "must be ≥ 16"));
        }
        if d.n_per_class == 0 {
            return Err(invalid("data.n_per_class", "must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&d.spuriousness) {
            return Err(invalid("data.spuriousness", "must be in [0, 1]"));
        }
        if !(d.imbalance_ratio >= 1.0) {
            return Err(invalid("data.imbalance_ratio", "must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&d.noise_ratio) {
            return Err(invalid("data.noise_ratio", "must be in [0, 1)"));
        }
        if d.noise_kind != NoiseKind::None && d.noise_ratio == 0.0 {
            return Err(invalid(
                "data.noise_ratio",
                "must be > 0 when data.noise_kind is set",
            ));
        }
        if d.noise_kind == NoiseKind::None && d.noise_ratio > 0.0 {
            return Err(invalid(
                "data.noise_kind",
                "must be uniform or flip when data.noise_ratio > 0",
            ));
        }
        if d.meta_per_class == 0 {
            return Err(invalid("data.meta_per_class", "must be ≥ 1"));
        }

        let a = &self.augment;
        if !(a.epsilon.is_finite() && a.epsilon > 0.0) {
            return Err(invalid("augment.epsilon", "must be finite and > 0"));
        }
        if a.mode != AugmentSelect::FactualOnly {
            crate::causalaug::InfillSpec {
                mode: crate::causalaug::AugMode::Counterfactual,
                method: a.cf_method,
                epsilon: a.epsilon,
                fgsm_target: a.fgsm_target,
            }
            .validate()
            .map_err(|e| invalid("augment.cf_method", &e.to_string()))?;
        }
        if a.mode != AugmentSelect::CounterfactualOnly {
            crate::causalaug::InfillSpec {
                mode: crate::causalaug::AugMode::Factual,
                method: a.f_method,
                epsilon: a.epsilon,
                fgsm_target: a.fgsm_target,
            }
            .validate()
            .map_err(|e| invalid("augment.f_method", &e.to_string()))?;
        }

        if self.model.pnet_hidden == 0 {
            return Err(invalid("model.pnet_hidden", "must be ≥ 1"));
        }
        if self.model.hidden_widths.iter().any(|&w| w == 0) {
            return Err(invalid("model.hidden_widths", "widths must be ≥ 1"));
        }

        self.train_config()
            .validate()
            .map_err(|e| invalid("train", &e.to_string()))?;

        if self.run_name.is_empty() {
            return Err(invalid("run_name", "must be non-empty"));
        }
        if self.output_dir.is_empty() {
            return Err(invalid("output_dir", "must be non-empty"));
        }
        Ok(())
    }

    /// The bias regimes the train split gets after synthesis.
    pub fn bias_spec(&self) -> BiasSpec {
        BiasSpec {
            imbalance_ratio: self.data.imbalance_ratio,
            noise_kind: self.data.noise_kind,
            noise_ratio: self.data.noise_ratio,
            spuriousness: self.data.spuriousness,
            group_counts: None,
        }
    }

    /// The metadata augmentation recipe.
    pub fn augment_plan(&self) -> AugmentPlan {
        AugmentPlan {
            cf_fraction: match self.augment.mode {
                AugmentSelect::Both => 0.5,
                AugmentSelect::CounterfactualOnly => 1.0,
                AugmentSelect::FactualOnly => 0.0,
            },
            cf_method: self.augment.cf_method,
            f_method: self.augment.f_method,
            epsilon: self.augment.epsilon,
            fgsm_target: self.augment.fgsm_target,
            seed: self.augment.seed,
        }
    }

    /// The training loop configuration (library-only knobs keep their
    /// defaults; `freeze_pnet` is decided by the run mode, not the file).
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta1: self.train.eta1,
            eta2: self.train.eta2,
            batch_n: self.train.batch_n,
            batch_m: self.train.batch_m,
            iters: self.train.iters,
            lambda: self.train.lambda,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            detach_saliency: self.train.detach_saliency,
            saliency_on_train: true,
            freeze_pnet: false,
            seed: self.train.seed,
        }
    }
}

fn invalid(path: &str, msg: &str) -> ConfigError {
    ConfigError::Invalid(format!("{path}: {msg}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
run_name = "demo"

[data]
classes = 4
height = 16
width = 16
n_per_class = 50
meta_per_class = 5
seed = 7

[augment]
seed = 8

[model]
hidden_widths = [32]
init_seed = 9

[train]
eta1 = 0.05
eta2 = 0.05
batch_n = 16
batch_m = 8
iters = 100
seed = 10
"#;

    #[test]
    fn minimal_config_fills_documented_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.data.backgrounds, 2);
        assert_eq!(cfg.data.spuriousness, 0.0);
        assert_eq!(cfg.data.imbalance_ratio, 1.0);
        assert_eq!(cfg.data.noise_kind, NoiseKind::None);
        assert_eq!(cfg.data.noise_ratio, 0.0);
        assert_eq!(cfg.augment.mode, AugmentSelect::Both);
        assert_eq!(cfg.augment.cf_method, InfillMethod::Grey);
        assert_eq!(cfg.augment.f_method, InfillMethod::Random);
        assert_eq!(cfg.augment.epsilon, 0.5);
        assert_eq!(cfg.augment.fgsm_target, FgsmTarget::RandomOtherClass);
        assert_eq!(cfg.model.pnet_hidden, 100);
        assert_eq!(cfg.train.lambda, 0.6);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 1e-4);
        assert!(!cfg.train.detach_saliency);
        assert_eq!(cfg.eval, EvalSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let bad = MINIMAL.replace("[augment]", "[augment]\nglitter = true");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("glitter"), "{err}");

        let bad = format!("{MINIMAL}\nstray = 1\n");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("stray"), "{err}");
    }

    #[test]
    fn seeds_are_mandatory() {
        let bad = MINIMAL.replace("seed = 10", "");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn validation_errors_carry_key_paths() {
        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.data.spuriousness = 1.5;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("data.spuriousness"), "{err}");

        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.train.lambda = -0.1;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");

        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.data.noise_ratio = 0.4;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("data.noise_kind"), "{err}");
    }

    #[test]
    fn incompatible_infill_methods_are_refused() {
        // tile erases foregrounds; it cannot serve the factual side
        let bad = MINIMAL.replace("[augment]", "[augment]\nf_method = \"tile\"");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("augment.f_method"), "{err}");

        // …but a factual-only plan never touches cf_method
        let ok = MINIMAL.replace(
            "[augment]",
            "[augment]\nmode = \"f\"\ncf_method = \"fgsm\"",
        );
        RunConfig::from_toml_str(&ok).unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        let echoed = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&echoed).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn section_translations_match_the_file() {
        let toml = MINIMAL
            .replace("[augment]", "[augment]\nmode = \"cf\"\nepsilon = 0.25")
            .replace(
                "[data]",
                "[data]\nspuriousness = 0.95\nimbalance_ratio = 10.0",
            );
        let cfg = RunConfig::from_toml_str(&toml).unwrap();

        let bias = cfg.bias_spec();
        assert_eq!(bias.spuriousness, 0.95);
        assert_eq!(bias.imbalance_ratio, 10.0);
        assert_eq!(bias.noise_kind, NoiseKind::None);

        let plan = cfg.augment_plan();
        assert_eq!(plan.cf_fraction, 1.0);
        assert_eq!(plan.epsilon, 0.25);
        assert_eq!(plan.seed, 8);

        let tc = cfg.train_config();
        assert_eq!(tc.batch_n, 16);
        assert_eq!(tc.batch_m, 8);
        assert_eq!(tc.seed, 10);
        assert!(tc.saliency_on_train);
        assert!(!tc.freeze_pnet);
        tc.validate().unwrap();

        // mode "f" zeroes the counterfactual fraction
        let toml = MINIMAL.replace("[augment]", "[augment]\nmode = \"f\"");
        assert_eq!(
            RunConfig::from_toml_str(&toml).unwrap().augment_plan().cf_fraction,
            0.0
        );
    }
}
