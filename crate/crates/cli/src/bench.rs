//! Benchmark sweep over (property, method) cells plus the derived artifacts:
//! the records table, per-method cactus curves, and solve-cost summaries.

use crate::props::PropertyFile;
use crate::runner::{run_property, RunRecord};
use anyhow::{bail, Context, Result};
use relubab_core::{BabConfig, Checkpoint};
use std::collections::BTreeSet;
use std::time::Duration;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub methods: Vec<String>,
    pub timeout: Option<Duration>,
    pub max_branches: Option<u64>,
    pub prune_tol: f64,
    pub seed: u64,
    /// Worker threads for the sweep; 0 keeps the global default.
    pub workers: usize,
    /// Online fine-tuning inside gnn runs.
    pub online: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: vec!["random".into(), "sr".into(), "gnn".into()],
            timeout: Some(Duration::from_secs(60)),
            max_branches: None,
            prune_tol: 1e-6,
            seed: 0,
            workers: 0,
            online: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    /// Sorted by (property_id, method).
    pub records: Vec<RunRecord>,
    pub methods: Vec<String>,
    pub properties: usize,
}

fn solved(status: &str) -> bool {
    status == "verified" || status == "falsified"
}

/// Runs every (property, method) cell, in parallel up to the worker count.
/// Each cell gets a seed derived from its index in the sorted cell list, so
/// results do not depend on scheduling.
pub fn run_bench(
    props: &[PropertyFile],
    cfg: &BenchConfig,
    checkpoint: Option<&Checkpoint>,
) -> Result<BenchOutput> {
    if props.is_empty() || cfg.methods.is_empty() {
        bail!("bench needs at least one property and one method");
    }
    if cfg.methods.contains(&"gnn".to_string()) && checkpoint.is_none() {
        bail!("the gnn method needs --checkpoint");
    }
    let mut sorted: Vec<&PropertyFile> = props.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let bab = BabConfig {
        timeout: cfg.timeout,
        prune_tol: cfg.prune_tol,
        max_branches: cfg.max_branches,
    };
    let cells: Vec<(usize, &PropertyFile, &str)> = sorted
        .iter()
        .flat_map(|p| cfg.methods.iter().map(move |m| (*p, m.as_str())))
        .enumerate()
        .map(|(i, (p, m))| (i, p, m))
        .collect();
    let sweep = |cells: &[(usize, &PropertyFile, &str)]| -> Vec<RunRecord> {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(i, prop, method)| {
                let seed = cfg
                    .seed
                    .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                run_property(prop, method, &bab, seed, cfg.online, checkpoint).0
            })
            .collect()
    };
    let mut records = if cfg.workers == 0 {
        sweep(&cells)
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .context("building worker pool")?;
        pool.install(|| sweep(&cells))
    };
    records.sort_by(|a, b| {
        a.property_id
            .cmp(&b.property_id)
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(BenchOutput {
        records,
        methods: cfg.methods.clone(),
        properties: sorted.len(),
    })
}

pub fn arithmetic_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Geometric mean; zero entries pull the mean to its limit value zero.
pub fn geometric_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    if xs.iter().any(|&x| x < 0.0) {
        return f64::NAN;
    }
    if xs.iter().any(|&x| x == 0.0) {
        return 0.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// `property_id,method,status,time_s,branches,gnn_usage_ratio,seed` rows.
pub fn records_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("property_id,method,status,time_s,branches,gnn_usage_ratio,seed\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{:.6},{}\n",
            r.property_id, r.method, r.status, r.time_s, r.branches, r.gnn_usage_ratio, r.seed
        ));
    }
    out
}

/// Per-method solve times in ascending order against the fraction of all
/// properties solved within that time: the cactus curve.
pub fn cactus_csv(out: &BenchOutput) -> String {
    let mut text = String::from("method,time_s,frac_solved\n");
    for method in &out.methods {
        let mut times: Vec<f64> = out
            .records
            .iter()
            .filter(|r| &r.method == method && solved(&r.status))
            .map(|r| r.time_s)
            .collect();
        times.sort_by(f64::total_cmp);
        for (i, t) in times.iter().enumerate() {
            let frac = (i + 1) as f64 / out.properties as f64;
            text.push_str(&format!("{method},{t:.6},{frac:.6}\n"));
        }
    }
    text
}

/// Ids of the properties every method solved; cost comparisons across
/// methods are restricted to this set so timeouts cannot skew them.
pub fn commonly_solved(out: &BenchOutput) -> BTreeSet<String> {
    let mut common: Option<BTreeSet<String>> = None;
    for method in &out.methods {
        let ids: BTreeSet<String> = out
            .records
            .iter()
            .filter(|r| &r.method == method && solved(&r.status))
            .map(|r| r.property_id.clone())
            .collect();
        common = Some(match common {
            None => ids,
            Some(prev) => prev.intersection(&ids).cloned().collect(),
        });
    }
    common.unwrap_or_default()
}

/// Per-method aggregates. Means cover the commonly-solved set only.
pub fn summary_csv(out: &BenchOutput) -> String {
    let common = commonly_solved(out);
    let mut text = String::from(
        "method,properties,solved,timeouts,errors,common_solved,\
         mean_time_s,geomean_time_s,mean_branches,geomean_branches,mean_gnn_usage_ratio\n",
    );
    for method in &out.methods {
        let rows: Vec<&RunRecord> = out
            .records
            .iter()
            .filter(|r| &r.method == method)
            .collect();
        let solved_n = rows.iter().filter(|r| solved(&r.status)).count();
        let timeouts = rows.iter().filter(|r| r.status == "timeout").count();
        let errors = rows.iter().filter(|r| r.status == "error").count();
        let in_common: Vec<&&RunRecord> = rows
            .iter()
            .filter(|r| common.contains(&r.property_id))
            .collect();
        let times: Vec<f64> = in_common.iter().map(|r| r.time_s).collect();
        let branches: Vec<f64> = in_common.iter().map(|r| r.branches as f64).collect();
        let usage: Vec<f64> = in_common.iter().map(|r| r.gnn_usage_ratio).collect();
        text.push_str(&format!(
            "{method},{},{solved_n},{timeouts},{errors},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            rows.len(),
            common.len(),
            arithmetic_mean(&times),
            geometric_mean(&times),
            arithmetic_mean(&branches),
            geometric_mean(&branches),
            arithmetic_mean(&usage),
        ));
    }
    text
}

/// Drops a named column from CSV text; comparisons across reruns use this to
/// ignore wall-clock fields.
pub fn strip_csv_column(text: &str, column: &str) -> String {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let names: Vec<&str> = header.split(',').collect();
    let Some(drop) = names.iter().position(|n| *n == column) else {
        return text.to_string();
    };
    let keep = |fields: Vec<&str>| -> String {
        fields
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != drop)
            .map(|(_, f)| f)
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = keep(names) + "\n";
    for line in lines {
        out.push_str(&keep(line.split(',').collect()));
        out.push('\n');
    }
    out
}
