//! Command-line front end: `synth` materializes the dataset containers,
//! `train` fits a classifier under one of three modes, `eval` scores a
//! checkpoint, and `report` tabulates every metrics file of a run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clp_core::config::RunConfig;
use clp_core::evalreport::MetricsReport;
use clp_core::pipeline::{cmd_eval, cmd_synth, cmd_train, RunMode, RunPaths};

#[derive(Parser)]
#[command(
    name = "clp",
    version,
    about = "Causal logit-perturbation training on synthetic spurious-correlation benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the train/test/meta containers described by the config
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a classifier and write its checkpoint, history, and metrics
    Train {
        #[arg(long)]
        config: PathBuf,
        /// clp (bi-level, augmented metadata), erm (plain baseline), or
        /// meta_lp (bi-level, raw metadata)
        #[arg(long)]
        mode: String,
    },
    /// Score a checkpoint on the test container
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for eval artifacts (defaults to the checkpoint's)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate every metrics file in the run directory
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Directory to scan (defaults to the run directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth { config } => {
            let cfg = RunConfig::from_path(&config)?;
            let summary = cmd_synth(&cfg)?;
            println!("wrote {} files:", summary.files.len());
            for f in &summary.files {
                println!("  {}", f.display());
            }
            print_counts("train", &summary.train_class_counts);
            print_counts("test", &summary.test_class_counts);
            print_counts("meta", &summary.meta_class_counts);
            let groups: Vec<String> = summary
                .train_group_counts
                .iter()
                .map(|(id, n)| format!("{id}:{n}"))
                .collect();
            println!("train groups  {}", groups.join(" "));
            Ok(())
        }
        Command::Train { config, mode } => {
            let cfg = RunConfig::from_path(&config)?;
            let mode = RunMode::parse(&mode)?;
            let summary = cmd_train(&cfg, mode)?;
            println!("mode            {}", summary.mode.name());
            if let Some(m) = summary.meta_len {
                println!("metadata        {m} samples");
            }
            if let Some(a) = summary.augmented_len {
                println!("metadata+views  {a} samples");
            }
            println!("iterations      {}", summary.iterations);
            if let Some(l) = summary.final_train_loss {
                println!("final loss      {l:.6}");
            }
            print_metrics(&summary.metrics);
            println!("wrote {} files:", summary.files.len());
            for f in &summary.files {
                println!("  {}", f.display());
            }
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            out,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            let summary = cmd_eval(&cfg, &checkpoint, out.as_deref())?;
            print_metrics(&summary.metrics);
            if let Some(diag) = &summary.loss_diagnostic {
                let show = |f: Option<f64>| {
                    f.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
                };
                println!(
                    "loss increase   clean {} ({} samples), noisy {} ({} samples)",
                    show(diag.clean_fraction),
                    diag.n_clean,
                    show(diag.noisy_fraction),
                    diag.n_noisy
                );
            }
            println!("wrote {} files:", summary.files.len());
            for f in &summary.files {
                println!("  {}", f.display());
            }
            Ok(())
        }
        Command::Report { config, out } => {
            let cfg = RunConfig::from_path(&config)?;
            let dir = out.unwrap_or_else(|| RunPaths::new(&cfg).run_dir);
            report_table(&dir)
        }
    }
}

fn print_counts(name: &str, counts: &[usize]) {
    println!(
        "{name:<6}        {counts:?} ({} total)",
        counts.iter().sum::<usize>()
    );
}

fn print_metrics(m: &MetricsReport) {
    println!("top-1 acc       {:.4}", m.top1_acc);
    println!("top-1 err       {:.4}", m.top1_err);
    println!("macro precision {:.4}", m.macro_precision);
    println!("worst group     {:.4}", m.worst_group_acc);
    println!("eval samples    {}", m.n_eval);
}

/// Prints one row per `*.metrics.json` in `dir`, sorted by file name.
fn report_table(dir: &Path) -> anyhow::Result<()> {
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", dir.display()))?
    {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(".metrics.json") {
            let report = MetricsReport::from_json(&std::fs::read_to_string(&path)?)?;
            rows.push((stem.to_string(), report));
        }
    }
    if rows.is_empty() {
        anyhow::bail!("no metrics files in {}", dir.display());
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    println!(
        "{:<12} {:>9} {:>9} {:>12} {:>12} {:>8}",
        "run", "top1_acc", "top1_err", "macro_prec", "worst_group", "n_eval"
    );
    for (name, m) in &rows {
        println!(
            "{:<12} {:>9.4} {:>9.4} {:>12.4} {:>12.4} {:>8}",
            name, m.top1_acc, m.top1_err, m.macro_precision, m.worst_group_acc, m.n_eval
        );
    }
    Ok(())
}
