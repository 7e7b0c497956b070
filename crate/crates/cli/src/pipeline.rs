//! Thin wrappers turning property files into datasets and checkpoints.

use crate::props::PropertyFile;
use anyhow::{Context, Result};
use relubab_core::{
    gen_dataset, load_dataset, save_checkpoint, save_dataset, train, DatasetHeader,
    DatasetProperty, EpochRow, GenConfig, GenStats, Network, TrainConfig, TrainOutcome,
};
use relubab_core::learn::DATASET_SCHEMA;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Decodes every property into the solver-side triple the generator wants.
pub fn dataset_properties(props: &[(PathBuf, PropertyFile)]) -> Result<Vec<DatasetProperty>> {
    props
        .iter()
        .map(|(_, p)| {
            let (network, domain) = p.problem()?;
            Ok(DatasetProperty {
                id: p.id.clone(),
                network,
                domain,
            })
        })
        .collect()
}

/// Property id to its embedded network, for training and scoring.
pub fn networks_by_id(props: &[(PathBuf, PropertyFile)]) -> Result<BTreeMap<String, Network>> {
    props
        .iter()
        .map(|(_, p)| Ok((p.id.clone(), p.problem()?.0)))
        .collect()
}

/// Generates strong-branching samples for every property and writes the
/// dataset. Returns the sample count and the generator's bookkeeping.
pub fn cmd_gendata(
    props: &[(PathBuf, PropertyFile)],
    out: &Path,
    cfg: &GenConfig,
    workers: usize,
) -> Result<(usize, GenStats)> {
    let dataset_props = dataset_properties(props)?;
    let (samples, stats) = if workers == 0 {
        gen_dataset(&dataset_props, cfg)?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .context("building worker pool")?;
        pool.install(|| gen_dataset(&dataset_props, cfg))?
    };
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        models: props
            .iter()
            .map(|(path, p)| (p.id.clone(), path.display().to_string()))
            .collect(),
        samples_per_property: cfg.samples_per_property,
        max_cheap_steps: cfg.max_cheap_steps,
        full_fraction: cfg.full_fraction,
        seed: cfg.seed,
    };
    save_dataset(out, &header, &samples)?;
    Ok((samples.len(), stats))
}

/// The `epoch,train_loss,val_loss,val_acc_rel,val_acc_abs,lr` table.
pub fn curve_csv(log: &[EpochRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_acc_rel,val_acc_abs,lr\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e}\n",
            row.epoch, row.train_loss, row.val_loss, row.val_acc_rel, row.val_acc_abs, row.lr
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub samples: usize,
    pub properties: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub final_val_acc_rel: f64,
    pub diverged: bool,
}

/// Trains on a dataset, resolving networks from the property files, then
/// writes the checkpoint and accuracy curve.
pub fn cmd_train(
    dataset_path: &Path,
    props: &[(PathBuf, PropertyFile)],
    checkpoint_out: &Path,
    curve_out: &Path,
    cfg: &TrainConfig,
) -> Result<(TrainReport, TrainOutcome)> {
    let (_, samples) = load_dataset(dataset_path)?;
    let networks = networks_by_id(props)?;
    let outcome = train(&samples, &networks, cfg)?;
    save_checkpoint(checkpoint_out, &outcome.gnn, &outcome.norm, cfg.seed)?;
    std::fs::write(curve_out, curve_csv(&outcome.log))
        .with_context(|| format!("writing {}", curve_out.display()))?;
    let property_count = samples
        .iter()
        .map(|s| s.property_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let report = TrainReport {
        samples: samples.len(),
        properties: property_count,
        epochs_run: outcome.epochs_run,
        best_val_loss: outcome.best_val_loss,
        final_val_acc_rel: outcome.log.last().map_or(0.0, |r| r.val_acc_rel),
        diverged: outcome.diverged,
    };
    Ok((report, outcome))
}
