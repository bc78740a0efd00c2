//! Running one incremental stream and writing its outputs.

use std::path::Path;

use incgan::datagen::{generate_dataset, read_container, ArchitectureData, Dataset, Split};
use incgan::learner::{Learner, MetricsReport, StepReport};
use incgan::{Error, Result};

use crate::config::ExperimentConfig;
use crate::report::{confusion_csv, emit_svg_curve, epochs_csv, metrics_csv, write_atomic, Series};

/// Reads `data_dir` when set, otherwise generates the stream in memory.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.data_dir {
        Some(dir) => read_container(dir)?,
        None => generate_dataset(&cfg.generator(), cfg.architectures)?,
    };
    if ds.architectures.len() < cfg.architectures {
        return Err(Error::Config(format!(
            "dataset holds {} architectures, config asks for {}",
            ds.architectures.len(),
            cfg.architectures
        )));
    }
    if ds.image_size < cfg.input_size() || ds.channels != cfg.channels {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, network expects {} channels at {}x{}",
            ds.channels,
            ds.image_size,
            ds.image_size,
            cfg.channels,
            cfg.input_size(),
            cfg.input_size()
        )));
    }
    Ok(ds)
}

pub struct RunOutcome {
    pub steps: Vec<(StepReport, MetricsReport)>,
    pub learner: Learner,
}

impl RunOutcome {
    pub fn final_metrics(&self) -> &MetricsReport {
        &self.steps.last().expect("at least one step").1
    }
}

fn class_sizes(learner: &Learner, data: &[&ArchitectureData]) -> Vec<usize> {
    learner
        .registry()
        .classes()
        .iter()
        .map(|c| {
            data.iter()
                .find(|a| a.arch == c.arch)
                .map(|a| a.split(Split::Train).iter().filter(|s| s.key.origin == c.origin).count())
                .unwrap_or(0)
        })
        .collect()
}

/// Initial training on the first architecture, then one increment per
/// further architecture; memory invariants are checked after every step.
pub fn run_stream(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mut progress: impl FnMut(&StepReport, &MetricsReport),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let archs: Vec<&ArchitectureData> = data.architectures.iter().take(cfg.architectures).collect();
    let (mut learner, first) = Learner::initialize(cfg.learner(), &archs[..1])?;
    let mut steps = Vec::with_capacity(archs.len());
    let check = |l: &Learner| {
        let sizes = class_sizes(l, &archs);
        l.check_invariants(|c| sizes[c])
    };
    check(&learner)?;
    let m = learner.evaluate(&archs)?;
    progress(&first, &m);
    steps.push((first, m));
    for a in &archs[1..] {
        let report = learner.increment(a)?;
        check(&learner)?;
        let m = learner.evaluate(&archs)?;
        progress(&report, &m);
        steps.push((report, m));
    }
    Ok(RunOutcome { steps, learner })
}

/// Detection curves: the overall accuracy plus one line per architecture
/// from the step it was added.
pub fn detection_series(steps: &[(StepReport, MetricsReport)]) -> Vec<Series> {
    let mut out = vec![Series {
        label: "all seen".into(),
        points: steps.iter().map(|(_, m)| (m.step as f64, m.detection_acc)).collect(),
    }];
    let Some((_, last)) = steps.last() else { return out };
    for &arch in &last.architectures {
        let points: Vec<(f64, f64)> = steps
            .iter()
            .filter_map(|(_, m)| {
                let i = m.architectures.iter().position(|&a| a == arch)?;
                Some((m.step as f64, m.per_arch_detection[i]))
            })
            .collect();
        out.push(Series {
            label: format!("arch{arch}"),
            points,
        });
    }
    out
}

/// Writes metrics, confusion, per-epoch losses, the curve, the resolved
/// config and a checkpoint below `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    write_atomic(&dir.join("config.txt"), &cfg.to_text())?;
    write_atomic(
        &dir.join("metrics.csv"),
        &metrics_csv(&outcome.steps, cfg.architectures, cfg.variant)?,
    )?;
    write_atomic(&dir.join("confusion.csv"), &confusion_csv(outcome.final_metrics())?)?;
    let reports: Vec<StepReport> = outcome.steps.iter().map(|(s, _)| s.clone()).collect();
    write_atomic(&dir.join("epochs.csv"), &epochs_csv(&reports)?)?;
    write_atomic(
        &dir.join("detection.svg"),
        &emit_svg_curve(&detection_series(&outcome.steps))?,
    )?;
    outcome.learner.save(&dir.join("checkpoint"))
}
