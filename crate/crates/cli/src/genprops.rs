//! Property generation: for each correctly classified image, bisect the
//! perturbation radius until the largest epsilon the verifier cannot falsify
//! is pinned down to the requested resolution.

use crate::props::{PropertyFile, PROPERTY_SCHEMA};
use anyhow::{bail, Context, Result};
use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relubab_core::{
    encode_property, make_box, network_to_json, verify, BabConfig, Network, SrStrategy,
    VerifyStatus,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Duration;

pub const IMAGE_SET_SCHEMA: &str = "image-set/1";
pub const GENPROPS_LOG_SCHEMA: &str = "genprops-log/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledImage {
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageSet {
    pub schema: String,
    pub images: Vec<LabeledImage>,
}

pub fn load_images(path: &Path) -> Result<ImageSet> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let set: ImageSet = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    if set.schema != IMAGE_SET_SCHEMA {
        bail!("{}: unsupported image set schema {}", path.display(), set.schema);
    }
    Ok(set)
}

pub fn save_images(path: &Path, set: &ImageSet) -> Result<()> {
    let mut text = serde_json::to_string_pretty(set)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsilonProbe {
    pub epsilon: f64,
    pub status: String,
    pub branches: u64,
    pub time_s: f64,
}

/// The bisection trace for one image, kept alongside the property it made.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsilonSearchResult {
    pub image_index: usize,
    pub label: usize,
    pub rival: usize,
    pub chosen_epsilon: f64,
    pub trace: Vec<EpsilonProbe>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenPropsLog {
    pub schema: String,
    pub model: String,
    pub count_requested: usize,
    pub eps_max: f64,
    pub resolution: f64,
    pub seed: u64,
    pub results: Vec<EpsilonSearchResult>,
    pub skipped: Vec<SkippedImage>,
}

#[derive(Debug, Clone)]
pub struct GenPropsConfig {
    /// Properties to emit; generation stops early when images run out.
    pub count: usize,
    /// Upper end of the searched radius range.
    pub eps_max: f64,
    /// Bisection stops once the bracket is at most this wide.
    pub resolution: f64,
    /// Per-probe wall-clock budget.
    pub timeout: Option<Duration>,
    /// Per-probe branch budget; lets callers trade the wall clock for a
    /// deterministic cutoff.
    pub max_branches: Option<u64>,
    pub clamp: bool,
    pub prune_tol: f64,
    pub seed: u64,
}

impl Default for GenPropsConfig {
    fn default() -> Self {
        GenPropsConfig {
            count: 50,
            eps_max: 0.5,
            resolution: 1e-3,
            timeout: Some(Duration::from_secs(60)),
            max_branches: None,
            clamp: true,
            prune_tol: 1e-6,
            seed: 0,
        }
    }
}

fn status_name(status: VerifyStatus) -> &'static str {
    match status {
        VerifyStatus::Verified => "verified",
        VerifyStatus::Falsified => "falsified",
        VerifyStatus::Timeout => "timeout",
    }
}

fn probe(
    encoded: &Network,
    center: &Array1<f64>,
    epsilon: f64,
    cfg: &GenPropsConfig,
) -> Result<EpsilonProbe> {
    let domain = make_box(center.view(), epsilon, cfg.clamp);
    let bab = BabConfig {
        timeout: cfg.timeout,
        prune_tol: cfg.prune_tol,
        max_branches: cfg.max_branches,
    };
    let outcome = verify(encoded, &domain, &mut SrStrategy, &bab)?;
    Ok(EpsilonProbe {
        epsilon,
        status: status_name(outcome.status).to_string(),
        branches: outcome.branch_count,
        time_s: outcome.elapsed.as_secs_f64(),
    })
}

/// Bisects on `[0, eps_max]` keeping the largest radius at which the probe
/// does not falsify. Zero is never probed: a correctly classified center is
/// nonnegative by construction. Returns the chosen radius and the trace.
pub fn search_epsilon(
    encoded: &Network,
    center: &Array1<f64>,
    cfg: &GenPropsConfig,
) -> Result<(f64, Vec<EpsilonProbe>)> {
    assert!(cfg.eps_max > 0.0 && cfg.resolution > 0.0);
    let mut trace = Vec::new();
    let top = probe(encoded, center, cfg.eps_max, cfg)?;
    let top_falsified = top.status == "falsified";
    trace.push(top);
    if !top_falsified {
        return Ok((cfg.eps_max, trace));
    }
    let (mut lo, mut hi) = (0.0f64, cfg.eps_max);
    while hi - lo > cfg.resolution {
        let mid = 0.5 * (lo + hi);
        let row = probe(encoded, center, mid, cfg)?;
        let falsified = row.status == "falsified";
        trace.push(row);
        if falsified {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((lo, trace))
}

/// Walks the images in order, skipping the misclassified ones, and builds up
/// to `cfg.count` properties. The rival label is drawn uniformly among the
/// wrong labels, seeded per image so reordering other images cannot shift it.
pub fn generate_properties(
    model: &Network,
    model_path: &str,
    images: &[LabeledImage],
    cfg: &GenPropsConfig,
) -> Result<(Vec<(PropertyFile, EpsilonSearchResult)>, Vec<SkippedImage>)> {
    let outputs = model.output_size();
    if outputs < 2 {
        bail!("model has {} outputs; need at least 2 for a rival label", outputs);
    }
    let mut made = Vec::new();
    let mut skipped = Vec::new();
    for (idx, image) in images.iter().enumerate() {
        if made.len() >= cfg.count {
            break;
        }
        if image.label >= outputs {
            skipped.push(SkippedImage {
                image_index: idx,
                reason: format!("label {} out of range for {} outputs", image.label, outputs),
            });
            continue;
        }
        let center = Array1::from(image.pixels.clone());
        let logits = model.eval(center.view())?;
        let predicted = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("nonempty logits");
        if predicted != image.label {
            skipped.push(SkippedImage {
                image_index: idx,
                reason: format!("misclassified: model predicts {predicted}, label is {}", image.label),
            });
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let mut rival = rng.gen_range(0..outputs - 1);
        if rival >= image.label {
            rival += 1;
        }
        let encoded = encode_property(model, image.label, rival)?;
        let (epsilon, trace) = search_epsilon(&encoded, &center, cfg)?;
        let id = format!("img{idx:04}");
        let prop = PropertyFile {
            schema: PROPERTY_SCHEMA.to_string(),
            id,
            model: model_path.to_string(),
            center: image.pixels.clone(),
            label: image.label,
            rival,
            epsilon,
            clamp: cfg.clamp,
            network: serde_json::from_str(&network_to_json(&encoded))?,
        };
        made.push((
            prop,
            EpsilonSearchResult {
                image_index: idx,
                label: image.label,
                rival,
                chosen_epsilon: epsilon,
                trace,
            },
        ));
    }
    Ok((made, skipped))
}
