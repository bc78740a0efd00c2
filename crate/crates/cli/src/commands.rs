//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;

use incgan::datagen::{write_container, ArchitectureData, Origin, Split};
use incgan::learner::{Learner, MetricsReport};
use incgan::memory::Budget;
use incgan::model::Variant;
use incgan::{Error, Result};

use crate::config::ExperimentConfig;
use crate::experiment::{load_dataset, run_stream, write_outputs, RunOutcome};
use crate::report::{
    ablation_csv, confusion_csv, fmt4, mark_best, metrics_csv, sweep_csv, write_atomic, AblationCell,
};

/// Generates the configured stream into `output_dir` and returns a summary.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let mut c = cfg.clone();
    c.data_dir = None;
    let ds = load_dataset(&c)?;
    write_container(&cfg.output_dir, &ds)?;
    let mut out = String::new();
    for a in &ds.architectures {
        let count = |o: Origin, s: Split| a.split(s).iter().filter(|x| x.key.origin == o).count();
        for o in [Origin::Gan, Origin::Real] {
            let _ = writeln!(
                out,
                "arch{} {o}: train {} val {} test {}",
                a.arch,
                count(o, Split::Train),
                count(o, Split::Val),
                count(o, Split::Test)
            );
        }
    }
    let _ = writeln!(out, "wrote {} samples to {}", ds.sample_count(), cfg.output_dir.display());
    Ok(out)
}

/// One human-readable line of step metrics.
pub fn describe(m: &MetricsReport) -> String {
    let per: Vec<String> = m.per_arch_detection.iter().map(|v| fmt4(*v)).collect();
    let mut line = format!(
        "step {} seen {} detection {} [{}] classification {}",
        m.step,
        m.architectures.len(),
        fmt4(m.detection_acc),
        per.join(" "),
        fmt4(m.classification_acc)
    );
    if let Some(aux) = m.aux_detector_acc {
        line.push_str(&format!(" detector {}", fmt4(aux)));
    }
    line
}

/// One full stream with all outputs written to `output_dir`.
pub fn cmd_run(cfg: &ExperimentConfig, verbose: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let outcome = run_stream(cfg, &data, |s, m| {
        if verbose {
            println!("{} epochs {}", describe(m), s.epochs_run);
        }
    })?;
    write_outputs(&cfg.output_dir, cfg, &outcome)?;
    Ok(outcome)
}

/// Final detection accuracy for every variant and budget, one run each,
/// all under the same seed and data.
pub fn cmd_budget_sweep(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    budgets: &[Budget],
    verbose: bool,
) -> Result<Vec<(Variant, Vec<f64>)>> {
    cfg.validate()?;
    if variants.is_empty() || budgets.is_empty() {
        return Err(Error::Config("budget sweep needs at least one variant and one budget".into()));
    }
    let mut variants = variants.to_vec();
    variants.sort_by_key(|v| Variant::ALL.iter().position(|x| x == v));
    variants.dedup();
    let data = load_dataset(cfg)?;
    let mut grid = Vec::new();
    for &variant in &variants {
        let mut row = Vec::new();
        for &budget in budgets {
            let mut c = cfg.clone();
            c.variant = variant;
            c.memory_budget = budget;
            c.output_dir = cfg.output_dir.join(format!("{variant}_M{budget}"));
            let outcome = run_stream(&c, &data, |_, _| {})?;
            write_outputs(&c.output_dir, &c, &outcome)?;
            let acc = outcome.final_metrics().detection_acc;
            if verbose {
                println!("{variant} M={budget}: {}", fmt4(acc));
            }
            row.push(acc);
        }
        grid.push((variant, row));
    }
    let names: Vec<String> = budgets.iter().map(Budget::to_string).collect();
    write_atomic(&cfg.output_dir.join("sweep.csv"), &sweep_csv(&names, &grid)?)?;
    Ok(grid)
}

/// Detection accuracy after the last architecture for every
/// `(variant, lambda, temperature)` cell, with the best cell per variant
/// marked.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    lambdas: &[f64],
    temperatures: &[f64],
    verbose: bool,
) -> Result<Vec<AblationCell>> {
    cfg.validate()?;
    if variants.is_empty() || lambdas.is_empty() || temperatures.is_empty() {
        return Err(Error::Config("ablation needs variants, lambdas and temperatures".into()));
    }
    let data = load_dataset(cfg)?;
    let mut cells = Vec::new();
    for &variant in variants {
        for &lambda in lambdas {
            for &temperature in temperatures {
                let mut c = cfg.clone();
                c.variant = variant;
                c.lambda = Some(lambda);
                c.temperature = temperature;
                c.output_dir = cfg
                    .output_dir
                    .join(format!("{variant}_lambda{lambda}_T{temperature}"));
                let outcome = run_stream(&c, &data, |_, _| {})?;
                write_outputs(&c.output_dir, &c, &outcome)?;
                let acc = outcome.final_metrics().detection_acc;
                if verbose {
                    println!("{variant} lambda={lambda} T={temperature}: {}", fmt4(acc));
                }
                cells.push(AblationCell {
                    variant,
                    lambda,
                    temperature,
                    detection_acc: acc,
                    best: false,
                });
            }
        }
    }
    mark_best(&mut cells);
    write_atomic(&cfg.output_dir.join("ablation.csv"), &ablation_csv(&cells)?)?;
    Ok(cells)
}

/// Metrics of a saved learner on the test splits of its architectures.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let archs: Vec<&ArchitectureData> = data.architectures.iter().collect();
    let learner = Learner::load(checkpoint, cfg.learner(), &archs)?;
    let m = learner.evaluate(&archs)?;
    let n = data.architectures.len().max(cfg.architectures);
    let step = incgan::learner::StepReport {
        step: m.step,
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        epochs_run: 0,
        best_epoch: None,
        stop_reason: incgan::learner::StopReason::MaxEpochs,
    };
    let rows = [(step, m.clone())];
    write_atomic(
        &cfg.output_dir.join("eval_metrics.csv"),
        &metrics_csv(&rows, n, learner.config().variant())?,
    )?;
    write_atomic(&cfg.output_dir.join("eval_confusion.csv"), &confusion_csv(&m)?)?;
    Ok(m)
}
