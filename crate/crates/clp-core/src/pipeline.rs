//! End-to-end run orchestration: synthesize → augment → train → evaluate →
//! report, with fixed artifact paths under `output_dir/run_name` and
//! deterministic child seeds per stage. These functions are the library
//! side of the command-line entry points.

use std::path::{Path, PathBuf};

use log::info;

use crate::causalaug::{augment_metadata, AugError};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::evalreport::{
    evaluate, loss_increase_fractions, report_emit, saliency_map, EvalError, LossIncreaseReport,
    MetricsReport, SaliencyMap,
};
use crate::metatrain::{train, train_erm, TrainConfig, TrainError};
use crate::models::ModelError;
use crate::synthdata::{
    apply_longtail, draw_meta_subset, inject_label_noise, read_container, write_container,
    DataError, DatasetContainer, NoiseKind,
};
use crate::util::{atomic_write, subseed};
use crate::{Mlp, PerturbNet};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("pipeline i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type PipelineResult<T> = Result<T, PipelineError>;

/// Training variants the CLI exposes: the full bi-level method, the plain
/// baseline, and the bi-level method on un-augmented metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Clp,
    Erm,
    MetaLp,
}

impl RunMode {
    pub fn parse(s: &str) -> PipelineResult<Self> {
        match s {
            "clp" => Ok(RunMode::Clp),
            "erm" => Ok(RunMode::Erm),
            "meta_lp" => Ok(RunMode::MetaLp),
            other => Err(PipelineError::Config(ConfigError::Invalid(format!(
                "mode: must be one of clp, erm, meta_lp, got `{other}`"
            )))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Clp => "clp",
            RunMode::Erm => "erm",
            RunMode::MetaLp => "meta_lp",
        }
    }
}

/// Fixed artifact layout of one run directory.
pub struct RunPaths {
    pub run_dir: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        RunPaths {
            run_dir: Path::new(&cfg.output_dir).join(&cfg.run_name),
        }
    }

    pub fn train_container(&self) -> PathBuf {
        self.run_dir.join("train.clpd")
    }

    pub fn test_container(&self) -> PathBuf {
        self.run_dir.join("test.clpd")
    }

    pub fn meta_container(&self) -> PathBuf {
        self.run_dir.join("meta.clpd")
    }

    pub fn config_echo(&self) -> PathBuf {
        self.run_dir.join("config.echo.toml")
    }

    pub fn checkpoint(&self, mode: RunMode) -> PathBuf {
        self.run_dir.join(format!("{}.clpw", mode.name()))
    }

    /// Prefix handed to the report emitter (`<prefix>.metrics.json`, …).
    pub fn report_prefix(&self, mode: RunMode) -> PathBuf {
        self.run_dir.join(mode.name())
    }
}

/// What the synth command produced, for the CLI's count table.
pub struct SynthSummary {
    pub files: Vec<PathBuf>,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
    pub meta_class_counts: Vec<usize>,
    /// (group id, count) over the train split, ascending by id.
    pub train_group_counts: Vec<(u16, usize)>,
}

/// Synthesizes the train/test/meta containers: a spuriously correlated,
/// optionally long-tailed and label-noised train pool; a clean balanced
/// uncorrelated test set; and a clean metadata subset carved out of the
/// train pool. Echoes the config for provenance.
pub fn cmd_synth(cfg: &RunConfig) -> PipelineResult<SynthSummary> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg);
    let d = &cfg.data;

    let mut pool = crate::synthdata::synth_spurshapes(
        d.classes,
        d.backgrounds,
        d.height,
        d.width,
        d.n_per_class,
        d.spuriousness,
        subseed(d.seed, 0),
    )?;
    if d.imbalance_ratio > 1.0 {
        pool = apply_longtail(&pool, d.imbalance_ratio, subseed(d.seed, 1))?;
    }
    if d.noise_kind != NoiseKind::None {
        pool = inject_label_noise(&pool, d.noise_kind, d.noise_ratio, subseed(d.seed, 2))?;
    }
    let (meta, train_split) = draw_meta_subset(&pool, d.meta_per_class, subseed(d.seed, 3))?;

    // evaluation data: same geometry, balanced, fully uncorrelated, clean
    let test = crate::synthdata::synth_spurshapes(
        d.classes,
        d.backgrounds,
        d.height,
        d.width,
        d.n_per_class,
        0.0,
        subseed(d.seed, 4),
    )?;

    write_container(&train_split, &paths.train_container())?;
    write_container(&test, &paths.test_container())?;
    write_container(&meta, &paths.meta_container())?;
    atomic_write(&paths.config_echo(), cfg.to_toml_string()?.as_bytes())?;

    let mut group_counts = std::collections::BTreeMap::new();
    for s in train_split.samples() {
        *group_counts.entry(s.group).or_insert(0usize) += 1;
    }
    Ok(SynthSummary {
        files: vec![
            paths.train_container(),
            paths.test_container(),
            paths.meta_container(),
            paths.config_echo(),
        ],
        train_class_counts: train_split.class_counts().to_vec(),
        test_class_counts: test.class_counts().to_vec(),
        meta_class_counts: meta.class_counts().to_vec(),
        train_group_counts: group_counts.into_iter().collect(),
    })
}

/// What the train command produced.
pub struct TrainSummary {
    pub mode: RunMode,
    /// Metadata container size before augmentation, when the mode uses one.
    pub meta_len: Option<usize>,
    /// Metadata size after augmentation (3·M̂ when both views are added).
    pub augmented_len: Option<usize>,
    pub iterations: usize,
    pub final_train_loss: Option<f64>,
    pub metrics: MetricsReport,
    pub files: Vec<PathBuf>,
}

/// Trains under the requested mode, writes the checkpoint, and emits the
/// post-training evaluation report. The baseline ignores the `[augment]`
/// section entirely; `meta_lp` trains on the raw metadata.
pub fn cmd_train(cfg: &RunConfig, mode: RunMode) -> PipelineResult<TrainSummary> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg);
    let train_ds = read_container(&paths.train_container())?;
    let test_ds = read_container(&paths.test_container())?;
    check_geometry(cfg, &train_ds, "train")?;
    check_geometry(cfg, &test_ds, "test")?;

    let classes = train_ds.classes();
    let model = Mlp::init(
        train_ds.pixel_dim(),
        &cfg.model.hidden_widths,
        classes,
        cfg.model.init_seed,
    )?;
    let tc = cfg.train_config();

    let mut meta_len = None;
    let mut augmented_len = None;
    let (state, history) = match mode {
        RunMode::Erm => {
            // The baseline is plain cross-entropy: no perturbations, no meta
            // step, and no mask-aware penalty, so it ignores both [augment]
            // and the saliency weight.
            let tc = TrainConfig {
                lambda: 0.0,
                ..tc.clone()
            };
            train_erm(&tc, model, &train_ds, Some(&test_ds))?
        }
        RunMode::MetaLp | RunMode::Clp => {
            let meta_ds = read_container(&paths.meta_container())?;
            check_geometry(cfg, &meta_ds, "meta")?;
            meta_len = Some(meta_ds.len());
            let meta_used = if mode == RunMode::Clp {
                let plan = cfg.augment_plan();
                let augmented = augment_metadata(&meta_ds, &plan, Some(&model))?;
                info!(
                    "augmented metadata: {} samples ({} originals + {} views)",
                    augmented.len(),
                    meta_ds.len(),
                    augmented.len() - meta_ds.len()
                );
                augmented_len = Some(augmented.len());
                augmented
            } else {
                meta_ds
            };
            let pnet = PerturbNet::init(
                classes,
                cfg.model.pnet_hidden,
                subseed(cfg.model.init_seed, 1),
            )?;
            train(&tc, model, pnet, &train_ds, &meta_used, Some(&test_ds))?
        }
    };

    // Evaluate before the first write so a failure cannot leave a partial
    // artifact set behind.
    let metrics = evaluate(&state.model, &test_ds)?;

    let ck = Checkpoint::from_state(&state);
    let ck_path = paths.checkpoint(mode);
    ck.write(&ck_path)?;
    let mut files = report_emit(&metrics, &history, &[], &paths.report_prefix(mode))?;
    files.insert(0, ck_path);

    Ok(TrainSummary {
        mode,
        meta_len,
        augmented_len,
        iterations: state.iteration,
        final_train_loss: history.steps.last().map(|s| s.train_loss),
        metrics,
        files,
    })
}

/// What the eval command produced.
#[derive(Debug)]
pub struct EvalSummary {
    pub metrics: MetricsReport,
    pub loss_diagnostic: Option<LossIncreaseReport>,
    pub files: Vec<PathBuf>,
}

/// Restores a checkpoint into the configured architecture and scores it on
/// the test container; optionally exports saliency maps for the configured
/// sample indices and the loss-increase diagnostic over the train split.
/// Artifacts land next to the checkpoint unless `out_dir` overrides that.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    out_dir: Option<&Path>,
) -> PipelineResult<EvalSummary> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg);
    let ck = Checkpoint::read(checkpoint_path)?;
    let test_ds = read_container(&paths.test_container())?;
    check_geometry(cfg, &test_ds, "test")?;

    let template = Mlp::init(
        test_ds.pixel_dim(),
        &cfg.model.hidden_widths,
        test_ds.classes(),
        0,
    )?;
    let pnet_template = if ck.has_pnet() {
        Some(PerturbNet::init(test_ds.classes(), cfg.model.pnet_hidden, 0)?)
    } else {
        None
    };
    let state = ck.restore(&template, pnet_template.as_ref())?;

    let metrics = evaluate(&state.model, &test_ds)?;

    let mut saliency: Vec<(usize, SaliencyMap)> = Vec::new();
    for &i in &cfg.eval.saliency_indices {
        saliency.push((i, saliency_map(&state.model, &test_ds, i)?));
    }

    let stem = checkpoint_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint")
        .to_string();
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| checkpoint_path.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));

    // Finish every computation before the first write so a failure cannot
    // leave a partial artifact set behind.
    let loss_diagnostic = if cfg.eval.loss_diagnostic && state.pnet.is_some() {
        let train_ds = read_container(&paths.train_container())?;
        check_geometry(cfg, &train_ds, "train")?;
        Some(loss_increase_fractions(
            &state.model,
            state.pnet.as_ref().expect("checked above"),
            &state.stats,
            &state.normalizer,
            &train_ds,
        )?)
    } else {
        None
    };

    let mut files = Vec::new();
    let metrics_path = dir.join(format!("{stem}.metrics.json"));
    atomic_write(&metrics_path, metrics.to_json()?.as_bytes())?;
    files.push(metrics_path);
    for (i, map) in &saliency {
        let p = dir.join(format!("{stem}.saliency-{i}.pgm"));
        map.write_pgm(&p)?;
        files.push(p);
    }
    if let Some(report) = &loss_diagnostic {
        let p = dir.join(format!("{stem}.lossdiag.json"));
        let mut body = serde_json::to_string_pretty(report)
            .map_err(|e| PipelineError::Eval(EvalError::Json(e)))?;
        body.push('\n');
        atomic_write(&p, body.as_bytes())?;
        files.push(p);
    }

    Ok(EvalSummary {
        metrics,
        loss_diagnostic,
        files,
    })
}

/// A container that disagrees with the config's geometry means the config
/// and the artifacts drifted apart — refuse early with a clear message.
fn check_geometry(cfg: &RunConfig, ds: &DatasetContainer, which: &str) -> PipelineResult<()> {
    if ds.classes() != cfg.data.classes
        || ds.height() != cfg.data.height
        || ds.width() != cfg.data.width
    {
        return Err(PipelineError::Config(ConfigError::Invalid(format!(
            "{which} container is {}×{} with {} classes, config says {}×{} with {}",
            ds.height(),
            ds.width(),
            ds.classes(),
            cfg.data.height,
            cfg.data.width,
            cfg.data.classes
        ))));
    }
    Ok(())
}
