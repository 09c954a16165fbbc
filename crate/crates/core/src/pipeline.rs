//! End-to-end runs: train a variant, score a held-out graph, sweep the
//! threshold, and compare variants side by side.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::cluster::{sweep_threshold, threshold_grid, LinkageSet, SweepResult};
use crate::error::{LinkError, Result};
use crate::graph::{FeatureStore, NeighborGraph};
use crate::metrics::MetricsReport;
use crate::model::{predict_all, ModelParameters, Variant};
use crate::numcore::{read_checkpoint, write_checkpoint};
use crate::train::{train, EpochStats, TrainConfig};

/// Thresholds 0.01, 0.02, ..., 0.99.
pub fn fine_grid() -> Vec<f64> {
    threshold_grid(0.01, 0.99, 99)
}

pub fn save_model(model: &ModelParameters, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| LinkError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model.variant.code(), &model.store)
        .and_then(|_| w.flush())
        .map_err(|e| LinkError::io(path, e))
}

/// Read a checkpoint; `dim` is only consulted for the parameter-free naive
/// variant.
pub fn load_model(path: &Path, dim: usize) -> Result<ModelParameters> {
    let file = File::open(path).map_err(|e| LinkError::io(path, e))?;
    let (code, store) = read_checkpoint(&mut BufReader::new(file))?;
    ModelParameters::from_store(Variant::from_code(code)?, store, dim)
}

/// Score every node of `store` with `model`.
pub fn score_graph(model: &ModelParameters, store: &FeatureStore, graph: &NeighborGraph) -> Result<LinkageSet> {
    LinkageSet::new(predict_all(model, store, graph)?, 0.5)
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub model: ModelParameters,
    pub trace: Vec<EpochStats>,
    pub links: LinkageSet,
    pub sweep: SweepResult,
    pub train_seconds: f64,
    pub predict_seconds: f64,
}

/// Train on one labeled graph, then score and sweep another.
pub fn run_variant(
    train_set: (&FeatureStore, &NeighborGraph),
    test_set: (&FeatureStore, &NeighborGraph),
    cfg: &TrainConfig,
    variant: Variant,
    grid: &[f64],
) -> Result<VariantRun> {
    let truth = test_set.0.require_labels("evaluation")?;
    let start = Instant::now();
    let outcome = train(train_set.0, train_set.1, cfg, variant)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let links = score_graph(&outcome.model, test_set.0, test_set.1)?;
    let predict_seconds = start.elapsed().as_secs_f64();
    let sweep = sweep_threshold(&links, truth, grid)?;
    Ok(VariantRun {
        variant,
        model: outcome.model,
        trace: outcome.trace,
        links,
        sweep,
        train_seconds,
        predict_seconds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub best_tau: f64,
    pub report: MetricsReport,
}

/// Best-threshold scores of every variant, in the order given.
pub fn ablate(
    train_set: (&FeatureStore, &NeighborGraph),
    test_set: (&FeatureStore, &NeighborGraph),
    cfg: &TrainConfig,
    variants: &[Variant],
    grid: &[f64],
) -> Result<Vec<(AblationRow, VariantRun)>> {
    variants
        .iter()
        .map(|&v| {
            let run = run_variant(train_set, test_set, cfg, v, grid)?;
            let best = run.sweep.best_row();
            log::info!(
                "{v}: best tau {:.2} pairwise F {:.4} ({:.1}s train, {:.2}s predict)",
                best.threshold,
                best.report.pairwise_f,
                run.train_seconds,
                run.predict_seconds
            );
            Ok((
                AblationRow {
                    variant: v,
                    best_tau: best.threshold,
                    report: best.report.clone(),
                },
                run,
            ))
        })
        .collect()
}

pub fn write_ablation(mut w: impl Write, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(w, "variant,best_tau,{}", MetricsReport::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{},{},{}", r.variant, r.best_tau, r.report.csv_row())?;
    }
    Ok(())
}
