//! Property files: self-contained robustness queries ready for the verifier.

use anyhow::{bail, Context, Result};
use ndarray::Array1;
use relubab_core::{make_box, parse_network, InputBox, Network};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const PROPERTY_SCHEMA: &str = "verify-property/1";

/// File suffix distinguishing property files from other JSON artifacts that
/// may share a directory (model files, search logs).
pub const PROPERTY_SUFFIX: &str = ".prop.json";

/// One robustness query: the difference logit `label - rival` must stay
/// nonnegative on an epsilon box around the center point. The encoded
/// difference network is embedded so the file needs no side lookups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyFile {
    pub schema: String,
    pub id: String,
    /// Source model path, kept for provenance only.
    pub model: String,
    pub center: Vec<f64>,
    pub label: usize,
    pub rival: usize,
    pub epsilon: f64,
    /// Whether the box was clamped to the unit hypercube.
    pub clamp: bool,
    /// Single-output difference network, in the model JSON schema.
    pub network: serde_json::Value,
}

impl PropertyFile {
    /// Decodes the embedded network and rebuilds the input box.
    pub fn problem(&self) -> Result<(Network, InputBox)> {
        let net = parse_network(&self.network.to_string())
            .with_context(|| format!("property {}: bad embedded network", self.id))?;
        if net.input_size() != self.center.len() {
            bail!(
                "property {}: center has {} values, network expects {}",
                self.id,
                self.center.len(),
                net.input_size()
            );
        }
        let center = Array1::from(self.center.clone());
        let domain = make_box(center.view(), self.epsilon, self.clamp);
        Ok((net, domain))
    }
}

pub fn save_property(path: &Path, prop: &PropertyFile) -> Result<()> {
    let mut text = serde_json::to_string_pretty(prop)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_property(path: &Path) -> Result<PropertyFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let prop: PropertyFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    if prop.schema != PROPERTY_SCHEMA {
        bail!(
            "{}: schema {} not supported (expected {})",
            path.display(),
            prop.schema,
            PROPERTY_SCHEMA
        );
    }
    Ok(prop)
}

/// Loads every `*.prop.json` in a directory, sorted by file name so callers
/// see a stable order regardless of directory enumeration.
pub fn load_properties_dir(dir: &Path) -> Result<Vec<(PathBuf, PropertyFile)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(PROPERTY_SUFFIX))
        })
        .collect();
    paths.sort();
    let mut props = Vec::with_capacity(paths.len());
    for path in paths {
        let prop = load_property(&path)?;
        props.push((path, prop));
    }
    if props.is_empty() {
        bail!("no {} files under {}", PROPERTY_SUFFIX, dir.display());
    }
    Ok(props)
}
