//! Running a whole experiment: train every variant, sweep each checkpoint on
//! the test split, then compare and plot.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{Dataset, ImageSet};
use crate::error::Result;
use crate::eval::{compare_variants, emit_plots, Comparison, EvalConfig, Evaluator, SweepResult, CSV_FILE};
use crate::net::Variant;
use crate::scalar::Scalar;
use crate::trainer::{fit, EpochMetrics, RunDir, Trainer};

/// Resolved experiment config written beside every output.
pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const COMPARISON_FILE: &str = "comparison.md";

/// Progress events of a running experiment.
#[derive(Debug)]
pub enum Event<'a> {
    Started { variant: Variant, run: &'a Path },
    Epoch { variant: Variant, metrics: &'a EpochMetrics },
    Swept { variant: Variant, result: &'a SweepResult },
}

/// Trains one variant of `exp` into a fresh run directory under
/// `<output_dir>/<variant>/`.
pub fn train_variant<T: Scalar>(
    exp: &ExperimentConfig,
    variant: Variant,
    ds: &Dataset,
    mut on_event: impl FnMut(Event),
) -> Result<(RunDir, Checkpoint<T>)> {
    let cfg = exp.train_config(variant)?;
    let run = RunDir::create(&exp.output_dir.join(variant.as_str()), &cfg)?;
    exp.save(&run.path.join(EXPERIMENT_FILE))?;
    on_event(Event::Started { variant, run: &run.path });
    let mut trainer = Trainer::<T>::new(cfg)?;
    fit(&mut trainer, ds, Some(&run), |m| on_event(Event::Epoch { variant, metrics: m }))?;
    Ok((run, trainer.checkpoint()))
}

/// Sweeps a checkpoint over `set`.
pub fn sweep_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, set: &ImageSet, cfg: &EvalConfig) -> Result<SweepResult> {
    let model = ckpt.model()?;
    Evaluator::from_checkpoint(ckpt, &model).sweep(ckpt.train.variant, set, cfg)
}

/// Outputs of a complete experiment.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub runs: Vec<(Variant, PathBuf)>,
    pub sweeps: Vec<SweepResult>,
    pub comparison: Comparison,
}

impl CaseReport {
    pub fn merged(&self) -> SweepResult {
        SweepResult::merge(&self.sweeps)
    }
}

/// Trains and sweeps every variant, then writes `sweep.csv`, the charts and
/// `comparison.md` under `exp.output_dir`.
pub fn run_experiment<T: Scalar>(exp: &ExperimentConfig, ds: &Dataset, mut on_event: impl FnMut(Event)) -> Result<CaseReport> {
    exp.validate()?;
    exp.save(&exp.output_dir.join(EXPERIMENT_FILE))?;
    let mut runs = Vec::new();
    let mut sweeps = Vec::new();
    for &variant in &exp.variants {
        let (run, ckpt) = train_variant::<T>(exp, variant, ds, &mut on_event)?;
        let sweep = sweep_checkpoint(&ckpt, &ds.test, &exp.eval)?;
        sweep.write_csv(&run.path.join(CSV_FILE))?;
        on_event(Event::Swept { variant, result: &sweep });
        runs.push((variant, run.path));
        sweeps.push(sweep);
    }
    let comparison = compare_variants(&sweeps)?;
    emit_plots(&SweepResult::merge(&sweeps), &exp.output_dir)?;
    fs::write(exp.output_dir.join(COMPARISON_FILE), comparison.to_markdown())?;
    Ok(CaseReport {
        runs,
        sweeps,
        comparison,
    })
}
