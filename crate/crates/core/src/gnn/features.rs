//! Node features read off a scored subdomain, and their normalization.

use super::GnnError;
use crate::bab::Subdomain;
use crate::bounds::alpha_beta;
use crate::network::{InputBox, Layer, Network};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub const INPUT_FEATS: usize = 3;
pub const ACT_FEATS: usize = 9;
pub const OUTPUT_FEATS: usize = 4;
pub const INPUT_BACK_FEATS: usize = 2;

/// Unnormalized node features of one subdomain, as stored in datasets.
///
/// Input nodes carry `(l, u, primal)`; activation nodes carry
/// `(l, u, beta, layer bias, primal pre, primal post, dual1, dual2, dual3)`;
/// the output node carries `(l, u, layer bias, primal)`; the backward-pass
/// input features are `(u, l)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawFeatures {
    pub input: Vec<[f64; INPUT_FEATS]>,
    pub act: Vec<Vec<[f64; ACT_FEATS]>>,
    pub output: [f64; OUTPUT_FEATS],
    pub input_back: Vec<[f64; INPUT_BACK_FEATS]>,
}

impl RawFeatures {
    pub fn is_finite(&self) -> bool {
        self.input.iter().flatten().all(|v| v.is_finite())
            && self.act.iter().flatten().flatten().all(|v| v.is_finite())
            && self.output.iter().all(|v| v.is_finite())
            && self.input_back.iter().flatten().all(|v| v.is_finite())
    }
}

/// Reads the feature vectors of every node from a subdomain that carries a
/// solved relaxation.
pub fn extract_features(
    net: &Network,
    domain: &InputBox,
    sub: &Subdomain,
) -> Result<RawFeatures, GnnError> {
    let relax = sub
        .relaxation
        .as_ref()
        .ok_or(GnnError::MissingRelaxation)?;
    let n0 = net.input_size();
    let mut input = Vec::with_capacity(n0);
    let mut input_back = Vec::with_capacity(n0);
    for j in 0..n0 {
        let (l, u) = (domain.lower[j], domain.upper[j]);
        input.push([l, u, relax.input[j]]);
        input_back.push([u, l]);
    }
    let mut act = Vec::with_capacity(net.num_hidden());
    for h in 0..net.num_hidden() {
        let bias = net.layers()[h].bias_flat();
        let mut layer = Vec::with_capacity(net.layer_out_size(h));
        for j in 0..net.layer_out_size(h) {
            let (l, u) = (sub.bounds.lower[h][j], sub.bounds.upper[h][j]);
            let beta = alpha_beta(l, u).map_err(|e| GnnError::Bounds(e.to_string()))?.beta;
            layer.push([
                l,
                u,
                beta,
                bias[j],
                relax.pre[h][j],
                relax.post[h][j],
                relax.relu_duals[h][[j, 0]],
                relax.relu_duals[h][[j, 1]],
                relax.relu_duals[h][[j, 2]],
            ]);
        }
        act.push(layer);
    }
    let out_layer = net.depth() - 1;
    let output = [
        sub.bounds.lower[out_layer][0],
        sub.bounds.upper[out_layer][0],
        net.layers()[out_layer].bias_flat()[0],
        relax.output,
    ];
    Ok(RawFeatures {
        input,
        act,
        output,
        input_back,
    })
}

/// Per-feature affine standardization `(value - shift) / scale`, fitted on
/// the training corpus and persisted with the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureNorm {
    pub input: Vec<(f64, f64)>,
    pub act: Vec<(f64, f64)>,
    pub output: Vec<(f64, f64)>,
    pub input_back: Vec<(f64, f64)>,
}

impl FeatureNorm {
    pub fn identity() -> Self {
        FeatureNorm {
            input: vec![(0.0, 1.0); INPUT_FEATS],
            act: vec![(0.0, 1.0); ACT_FEATS],
            output: vec![(0.0, 1.0); OUTPUT_FEATS],
            input_back: vec![(0.0, 1.0); INPUT_BACK_FEATS],
        }
    }

    /// Fits mean and standard deviation per feature column; scales are
    /// floored so constant features map to zero instead of dividing by zero.
    pub fn fit<'a>(samples: impl Iterator<Item = &'a RawFeatures> + Clone) -> Self {
        fn column_stats(values: impl Iterator<Item = f64>) -> (f64, f64) {
            let mut n = 0.0;
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for v in values {
                n += 1.0;
                let d = v - mean;
                mean += d / n;
                m2 += d * (v - mean);
            }
            if n == 0.0 {
                return (0.0, 1.0);
            }
            let std = (m2 / n).sqrt();
            (mean, std.max(1e-8))
        }
        let input = (0..INPUT_FEATS)
            .map(|c| {
                column_stats(
                    samples
                        .clone()
                        .flat_map(move |s| s.input.iter().map(move |row| row[c])),
                )
            })
            .collect();
        let act = (0..ACT_FEATS)
            .map(|c| {
                column_stats(samples.clone().flat_map(move |s| {
                    s.act.iter().flatten().map(move |row| row[c])
                }))
            })
            .collect();
        let output = (0..OUTPUT_FEATS)
            .map(|c| column_stats(samples.clone().map(move |s| s.output[c])))
            .collect();
        let input_back = (0..INPUT_BACK_FEATS)
            .map(|c| {
                column_stats(
                    samples
                        .clone()
                        .flat_map(move |s| s.input_back.iter().map(move |row| row[c])),
                )
            })
            .collect();
        FeatureNorm {
            input,
            act,
            output,
            input_back,
        }
    }
}

fn normalize_rows<const W: usize>(rows: &[[f64; W]], norm: &[(f64, f64)]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), W));
    for (r, row) in rows.iter().enumerate() {
        for c in 0..W {
            out[[r, c]] = (row[c] - norm[c].0) / norm[c].1;
        }
    }
    out
}

/// A subdomain prepared for message passing: normalized feature matrices
/// plus the raw gating constants (ambiguity masks, relaxation slopes, duals
/// and convolution fan-out corrections).
#[derive(Debug, Clone)]
pub struct GnnGraph {
    pub z_input: Array2<f64>,
    pub z_act: Vec<Array2<f64>>,
    pub z_output: Array2<f64>,
    pub z_input_back: Array2<f64>,
    pub mask: Vec<Array1<f64>>,
    pub alpha: Vec<Array1<f64>>,
    pub alpha_prime: Vec<Array1<f64>>,
    pub duals: Vec<[Array1<f64>; 3]>,
    /// Per network layer, reciprocal fan-out used to average transposed
    /// messages out of convolutional layers; `None` for dense layers.
    pub inv_fanout: Vec<Option<Array1<f64>>>,
}

impl GnnGraph {
    pub fn new(net: &Network, raw: &RawFeatures, norm: &FeatureNorm) -> Result<Self, GnnError> {
        if raw.act.len() != net.num_hidden() || raw.input.len() != net.input_size() {
            return Err(GnnError::Shape(format!(
                "features describe {} hidden layers and {} inputs, network has {} and {}",
                raw.act.len(),
                raw.input.len(),
                net.num_hidden(),
                net.input_size()
            )));
        }
        let mut mask = Vec::new();
        let mut alpha = Vec::new();
        let mut alpha_prime = Vec::new();
        let mut duals = Vec::new();
        for (h, layer) in raw.act.iter().enumerate() {
            if layer.len() != net.layer_out_size(h) {
                return Err(GnnError::Shape(format!(
                    "layer {h} features have {} rows, expected {}",
                    layer.len(),
                    net.layer_out_size(h)
                )));
            }
            let n = layer.len();
            let mut m = Array1::zeros(n);
            let mut a = Array1::zeros(n);
            let mut ap = Array1::zeros(n);
            let mut d = [Array1::zeros(n), Array1::zeros(n), Array1::zeros(n)];
            for (j, row) in layer.iter().enumerate() {
                let (l, u) = (row[0], row[1]);
                let relax = alpha_beta(l, u).map_err(|e| GnnError::Bounds(e.to_string()))?;
                m[j] = if l < 0.0 && u > 0.0 { 1.0 } else { 0.0 };
                a[j] = relax.alpha;
                ap[j] = if relax.alpha > 0.0 && relax.alpha < 1.0 {
                    1.0 - relax.alpha
                } else {
                    relax.alpha
                };
                d[0][j] = row[6];
                d[1][j] = row[7];
                d[2][j] = row[8];
            }
            mask.push(m);
            alpha.push(a);
            alpha_prime.push(ap);
            duals.push(d);
        }
        let inv_fanout = net
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Dense { .. } => None,
                Layer::Conv2d { .. } => {
                    Some(layer.fanout_counts().mapv(|c| 1.0 / c.max(1.0)))
                }
            })
            .collect();
        Ok(GnnGraph {
            z_input: normalize_rows(&raw.input, &norm.input),
            z_act: raw
                .act
                .iter()
                .map(|layer| normalize_rows(layer, &norm.act))
                .collect(),
            z_output: normalize_rows(std::slice::from_ref(&raw.output), &norm.output),
            z_input_back: normalize_rows(&raw.input_back, &norm.input_back),
            mask,
            alpha,
            alpha_prime,
            duals,
            inv_fanout,
        })
    }
}
