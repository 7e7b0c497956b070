//! One (property, strategy) verification cell, with panics and solver errors
//! folded into the record instead of aborting a sweep.

use crate::props::PropertyFile;
use anyhow::{bail, Result};
use relubab_core::{
    verify, BabConfig, BranchingStrategy, Checkpoint, GnnFailsafeStrategy, GnnPolicy,
    OnlineConfig, RandomStrategy, SrStrategy, StrongStrategy, VerifyStatus,
};
use serde::{Deserialize, Serialize};
use std::panic::{catch_unwind, AssertUnwindSafe};

pub const METHODS: &[&str] = &["random", "sr", "strong", "gnn"];

/// Improvement threshold below which the fail-safe wrapper measures the
/// heuristic's split as well.
pub const FAILSAFE_THRESHOLD: f64 = 0.2;

/// One row of the benchmark results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub property_id: String,
    pub method: String,
    /// verified | falsified | timeout | error
    pub status: String,
    pub time_s: f64,
    pub branches: u64,
    pub gnn_usage_ratio: f64,
    pub seed: u64,
}

/// The verify subcommand's output: a [`RunRecord`] without the wall-clock
/// field, so identical seeds produce byte-identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub property_id: String,
    pub method: String,
    pub status: String,
    pub branches: u64,
    pub visited: u64,
    pub gnn_usage_ratio: f64,
    pub seed: u64,
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<Vec<f64>>,
}

/// Builds a fresh strategy for one run. The checkpoint is shared read-only;
/// the gnn strategy clones the parameters so online updates stay run-local.
pub fn make_strategy(
    method: &str,
    seed: u64,
    online: bool,
    checkpoint: Option<&Checkpoint>,
) -> Result<Box<dyn BranchingStrategy>> {
    match method {
        "random" => Ok(Box::new(RandomStrategy::new(seed))),
        "sr" => Ok(Box::new(SrStrategy)),
        "strong" => Ok(Box::new(StrongStrategy)),
        "gnn" => {
            let Some(ckpt) = checkpoint else {
                bail!("the gnn strategy needs --checkpoint");
            };
            let policy = GnnPolicy {
                gnn: ckpt.gnn.clone(),
                norm: ckpt.norm.clone(),
            };
            let online = online.then(OnlineConfig::default);
            Ok(Box::new(GnnFailsafeStrategy::new(
                policy,
                FAILSAFE_THRESHOLD,
                online,
            )))
        }
        other => bail!("unknown strategy {other:?} (expected one of {METHODS:?})"),
    }
}

pub fn status_name(status: VerifyStatus) -> &'static str {
    match status {
        VerifyStatus::Verified => "verified",
        VerifyStatus::Falsified => "falsified",
        VerifyStatus::Timeout => "timeout",
    }
}

/// Runs one cell. Solver errors and panics become `status = "error"` rows so
/// one bad cell cannot sink a benchmark sweep.
pub fn run_property(
    prop: &PropertyFile,
    method: &str,
    bab: &BabConfig,
    seed: u64,
    online: bool,
    checkpoint: Option<&Checkpoint>,
) -> (RunRecord, Option<Vec<f64>>, u64) {
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<_> {
        let (net, domain) = prop.problem()?;
        let mut strategy = make_strategy(method, seed, online, checkpoint)?;
        Ok(verify(&net, &domain, strategy.as_mut(), bab)?)
    }));
    match outcome {
        Ok(Ok(out)) => (
            RunRecord {
                property_id: prop.id.clone(),
                method: method.to_string(),
                status: status_name(out.status).to_string(),
                time_s: out.elapsed.as_secs_f64(),
                branches: out.branch_count,
                gnn_usage_ratio: out.gnn_usage_ratio(),
                seed,
            },
            out.counterexample.map(|cx| cx.to_vec()),
            out.visited,
        ),
        Ok(Err(err)) => {
            eprintln!("error: {} / {method}: {err}", prop.id);
            (error_record(prop, method, seed), None, 0)
        }
        Err(_) => {
            eprintln!("error: {} / {method}: panicked", prop.id);
            (error_record(prop, method, seed), None, 0)
        }
    }
}

fn error_record(prop: &PropertyFile, method: &str, seed: u64) -> RunRecord {
    RunRecord {
        property_id: prop.id.clone(),
        method: method.to_string(),
        status: "error".to_string(),
        time_s: 0.0,
        branches: 0,
        gnn_usage_ratio: 0.0,
        seed,
    }
}
