//! Graph network over the verified network's own structure, scoring
//! ambiguous ReLU nodes as branching candidates.
//!
//! Nodes mirror the verified network (inputs, one node per ReLU pair, the
//! output); edges reuse the verified network's weights. Embeddings start at
//! zero and are refined by a fixed number of forward/backward update rounds;
//! a readout head turns ambiguous-node embeddings into scalar scores. All
//! update functions are small MLPs whose exact gradients are computed on an
//! expression tape, so inference and training share one evaluation path.

pub mod features;
mod passes;
mod tape;

pub use features::{extract_features, FeatureNorm, GnnGraph, RawFeatures};
pub use tape::{hinge_pair_count, Grads};

use crate::bab::BranchDecision;
use crate::network::Network;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tape::Tape;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("subdomain carries no relaxation solution")]
    MissingRelaxation,
    #[error("invalid bounds in features: {0}")]
    Bounds(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightId(pub(crate) usize);
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiasId(pub(crate) usize);

/// Flat arena of every learnable tensor, shared by the tape and optimizer.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub(crate) mats: Vec<Array2<f64>>,
    pub(crate) vecs: Vec<Array1<f64>>,
    pub(crate) mat_names: Vec<String>,
    pub(crate) vec_names: Vec<String>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore {
            mats: Vec::new(),
            vecs: Vec::new(),
            mat_names: Vec::new(),
            vec_names: Vec::new(),
        }
    }

    fn add_mat(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> WeightId {
        let normal = Normal::new(0.0, 0.1).expect("valid sigma");
        let m = Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
        self.mats.push(m);
        self.mat_names.push(name.to_string());
        WeightId(self.mats.len() - 1)
    }

    fn add_vec(&mut self, name: &str, len: usize) -> BiasId {
        self.vecs.push(Array1::zeros(len));
        self.vec_names.push(name.to_string());
        BiasId(self.vecs.len() - 1)
    }

    pub fn num_params(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum::<usize>()
            + self.vecs.iter().map(|v| v.len()).sum::<usize>()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.mats
            .iter()
            .map(|m| m.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            + self
                .vecs
                .iter()
                .map(|v| v.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Mlp {
    w1: WeightId,
    b1: BiasId,
    w2: Option<WeightId>,
    b2: Option<BiasId>,
}

impl Mlp {
    fn two_layer(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            w1: store.add_mat(&format!("{name}.w1"), hidden, inp, rng),
            b1: store.add_vec(&format!("{name}.b1"), hidden),
            w2: Some(store.add_mat(&format!("{name}.w2"), out, hidden, rng)),
            b2: Some(store.add_vec(&format!("{name}.b2"), out)),
        }
    }

    fn one_layer(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            w1: store.add_mat(&format!("{name}.w1"), out, inp, rng),
            b1: store.add_vec(&format!("{name}.b1"), out),
            w2: None,
            b2: None,
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, x: tape::ValueId) -> tape::ValueId {
        let h = tape.linear(x, self.w1, self.b1);
        let h = tape.relu(h);
        match (self.w2, self.b2) {
            (Some(w2), Some(b2)) => tape.linear(h, w2, b2),
            _ => h,
        }
    }
}

/// The thirteen update and readout MLPs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpSet {
    f_inp: Mlp,
    f_act_lf: Mlp,
    f_act_nb: Mlp,
    f_act_com: Mlp,
    f_out_lf: Mlp,
    f_out_com: Mlp,
    b_act_lf1: Mlp,
    b_act_lf2: Mlp,
    b_act_nb: Mlp,
    b_act_com: Mlp,
    b_inp_lf: Mlp,
    b_inp_com: Mlp,
    g_s: Mlp,
}

/// The branching scorer: parameters plus embedding hyperparameters.
#[derive(Debug, Clone)]
pub struct Gnn {
    pub p: usize,
    pub rounds: usize,
    pub(crate) store: ParamStore,
    pub(crate) mlps: MlpSet,
}

impl Gnn {
    /// Fresh parameters: Gaussian weights (sigma 0.1), zero biases, seeded.
    pub fn init(p: usize, rounds: usize, seed: u64) -> Self {
        assert!(p >= 1 && rounds >= 1, "embedding size and rounds must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let mlps = MlpSet {
            f_inp: Mlp::two_layer(s, "f_inp", features::INPUT_FEATS, p, p, r),
            f_act_lf: Mlp::two_layer(s, "f_act_lf", features::ACT_FEATS, p, p, r),
            f_act_nb: Mlp::two_layer(s, "f_act_nb", 2 * p, p, p, r),
            f_act_com: Mlp::two_layer(s, "f_act_com", 2 * p, p, p, r),
            f_out_lf: Mlp::one_layer(s, "f_out_lf", features::OUTPUT_FEATS, p, r),
            f_out_com: Mlp::two_layer(s, "f_out_com", 2 * p, p, p, r),
            b_act_lf1: Mlp::two_layer(s, "b_act_lf1", features::ACT_FEATS, p, p, r),
            b_act_lf2: Mlp::two_layer(s, "b_act_lf2", 4 * p, p, p, r),
            b_act_nb: Mlp::two_layer(s, "b_act_nb", 2 * p, p, p, r),
            b_act_com: Mlp::two_layer(s, "b_act_com", 2 * p, p, p, r),
            b_inp_lf: Mlp::two_layer(s, "b_inp_lf", features::INPUT_BACK_FEATS, p, p, r),
            b_inp_com: Mlp::two_layer(s, "b_inp_com", 2 * p, p, p, r),
            g_s: Mlp::two_layer(s, "g_s", p, p, 1, r),
        };
        Gnn {
            p,
            rounds,
            store,
            mlps,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.store.l2_norm_sq()
    }

    /// All parameter values in a stable order: matrices row-major, then
    /// vectors. [`Grads::flat`] uses the same order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for m in &self.store.mats {
            flat.extend(m.iter().copied());
        }
        for v in &self.store.vecs {
            flat.extend(v.iter().copied());
        }
        flat
    }

    /// Overwrites every parameter from a flat slice in [`Gnn::params_flat`]
    /// order. Panics when the length does not match.
    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "parameter count mismatch");
        let mut it = flat.iter().copied();
        for m in &mut self.store.mats {
            for x in m.iter_mut() {
                *x = it.next().expect("length checked");
            }
        }
        for v in &mut self.store.vecs {
            for x in v.iter_mut() {
                *x = it.next().expect("length checked");
            }
        }
    }
}

fn stacked_candidate_embeddings(
    tape: &mut Tape<'_>,
    mu_hidden: &[tape::ValueId],
    candidates: &[BranchDecision],
) -> tape::ValueId {
    debug_assert!(
        candidates.windows(2).all(|w| w[0] < w[1]),
        "candidates must be sorted by (layer, unit)"
    );
    let mut parts = Vec::new();
    let mut i = 0;
    while i < candidates.len() {
        let layer = candidates[i].layer;
        let mut rows = Vec::new();
        while i < candidates.len() && candidates[i].layer == layer {
            rows.push(candidates[i].unit);
            i += 1;
        }
        parts.push(tape.gather_rows(mu_hidden[layer], rows));
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(parts)
    }
}

fn candidate_scores(
    tape: &mut Tape<'_>,
    gnn: &Gnn,
    graph: &GnnGraph,
    candidates: &[BranchDecision],
) -> tape::ValueId {
    let outs = passes::run_rounds(tape, gnn, graph);
    let stack = stacked_candidate_embeddings(tape, &outs.mu_hidden, candidates);
    gnn.mlps.g_s.apply(tape, stack)
}

/// Scores each candidate node; candidates must be sorted by (layer, unit).
pub fn infer(
    gnn: &Gnn,
    net: &Network,
    graph: &GnnGraph,
    candidates: &[BranchDecision],
) -> Vec<f64> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut tape = Tape::new(net, &gnn.store);
    let scores = candidate_scores(&mut tape, gnn, graph, candidates);
    tape.value(scores).column(0).to_vec()
}

/// Pairwise hinge rank loss of the candidate scores against class labels,
/// with its exact parameter gradient. Returns `(loss, ranked pairs, grads)`;
/// zero pairs means the sample carries no ranking signal and a zero gradient.
pub fn hinge_loss_grad(
    gnn: &Gnn,
    net: &Network,
    graph: &GnnGraph,
    candidates: &[BranchDecision],
    labels: &[usize],
) -> (f64, usize, Grads) {
    assert_eq!(candidates.len(), labels.len());
    let mut tape = Tape::new(net, &gnn.store);
    let scores = candidate_scores(&mut tape, gnn, graph, candidates);
    let loss = tape.hinge_rank(scores, labels.to_vec());
    let value = tape.value(loss)[[0, 0]];
    let grads = tape.backward(loss);
    (value, hinge_pair_count(labels), grads)
}

/// Score gap `s(chosen by scorer) - s(chosen by heuristic)` with its
/// gradient; descending this gap pushes the heuristic's node above the
/// scorer's on the recorded subdomain.
pub fn score_gap_grad(
    gnn: &Gnn,
    net: &Network,
    graph: &GnnGraph,
    gnn_node: BranchDecision,
    heuristic_node: BranchDecision,
) -> (f64, Grads) {
    let mut pair = [gnn_node, heuristic_node];
    pair.sort();
    let gnn_idx = usize::from(pair[0] != gnn_node);
    let mut tape = Tape::new(net, &gnn.store);
    let scores = candidate_scores(&mut tape, gnn, graph, &pair);
    let gap = tape.score_gap(scores, gnn_idx, 1 - gnn_idx);
    let value = tape.value(gap)[[0, 0]];
    let grads = tape.backward(gap);
    (value, grads)
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: String,
    p: usize,
    rounds: usize,
    seed: u64,
    norm: FeatureNorm,
    tensors: Vec<TensorRecord>,
}

const CHECKPOINT_SCHEMA: &str = "gnn-checkpoint/1";

/// A trained scorer with the normalization fitted alongside it.
pub struct Checkpoint {
    pub gnn: Gnn,
    pub norm: FeatureNorm,
    pub seed: u64,
}

pub fn save_checkpoint(
    path: &std::path::Path,
    gnn: &Gnn,
    norm: &FeatureNorm,
    seed: u64,
) -> Result<(), GnnError> {
    let mut tensors = Vec::new();
    for (name, m) in gnn.store.mat_names.iter().zip(&gnn.store.mats) {
        tensors.push(TensorRecord {
            name: name.clone(),
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        });
    }
    for (name, v) in gnn.store.vec_names.iter().zip(&gnn.store.vecs) {
        tensors.push(TensorRecord {
            name: name.clone(),
            shape: vec![v.len()],
            data: v.to_vec(),
        });
    }
    let file = CheckpointFile {
        schema: CHECKPOINT_SCHEMA.to_string(),
        p: gnn.p,
        rounds: gnn.rounds,
        seed,
        norm: norm.clone(),
        tensors,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint, GnnError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.schema != CHECKPOINT_SCHEMA {
        return Err(GnnError::Checkpoint(format!(
            "unsupported schema {}",
            file.schema
        )));
    }
    let mut gnn = Gnn::init(file.p, file.rounds, 0);
    let mut seen = 0usize;
    for rec in &file.tensors {
        match rec.shape.len() {
            2 => {
                let idx = gnn
                    .store
                    .mat_names
                    .iter()
                    .position(|n| n == &rec.name)
                    .ok_or_else(|| GnnError::Checkpoint(format!("unknown tensor {}", rec.name)))?;
                let expect = gnn.store.mats[idx].raw_dim();
                if rec.shape != [expect[0], expect[1]] || rec.data.len() != expect[0] * expect[1] {
                    return Err(GnnError::Checkpoint(format!("bad shape for {}", rec.name)));
                }
                gnn.store.mats[idx] =
                    Array2::from_shape_vec((rec.shape[0], rec.shape[1]), rec.data.clone())
                        .expect("validated shape");
                seen += 1;
            }
            1 => {
                let idx = gnn
                    .store
                    .vec_names
                    .iter()
                    .position(|n| n == &rec.name)
                    .ok_or_else(|| GnnError::Checkpoint(format!("unknown tensor {}", rec.name)))?;
                if rec.data.len() != gnn.store.vecs[idx].len() {
                    return Err(GnnError::Checkpoint(format!("bad shape for {}", rec.name)));
                }
                gnn.store.vecs[idx] = Array1::from_vec(rec.data.clone());
                seen += 1;
            }
            _ => {
                return Err(GnnError::Checkpoint(format!(
                    "tensor {} has unsupported rank",
                    rec.name
                )))
            }
        }
    }
    let expected = gnn.store.mats.len() + gnn.store.vecs.len();
    if seen != expected {
        return Err(GnnError::Checkpoint(format!(
            "checkpoint has {seen} tensors, model needs {expected}"
        )));
    }
    Ok(Checkpoint {
        gnn,
        norm: file.norm,
        seed: file.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;
    use ndarray::array;
    use rand::Rng;

    fn toy_net() -> Network {
        Network::new(vec![
            Layer::Dense {
                weight: array![[0.6, -0.4], [0.3, 0.9], [-0.8, 0.2]],
                bias: array![0.05, -0.1, 0.0],
            },
            Layer::Dense {
                weight: array![[0.5, -0.7, 0.4]],
                bias: array![0.02],
            },
        ])
        .unwrap()
    }

    fn synthetic_features(rng: &mut ChaCha8Rng, net: &Network) -> RawFeatures {
        let mut input = Vec::new();
        let mut input_back = Vec::new();
        for _ in 0..net.input_size() {
            let l = -rng.gen_range(0.2..1.0);
            let u = rng.gen_range(0.2..1.0);
            input.push([l, u, rng.gen_range(l..u)]);
            input_back.push([u, l]);
        }
        let mut act = Vec::new();
        for h in 0..net.num_hidden() {
            let bias = net.layers()[h].bias_flat();
            let mut layer = Vec::new();
            for j in 0..net.layer_out_size(h) {
                let kind: u8 = rng.gen_range(0..3);
                let (l, u) = match kind {
                    0 => (-rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)),
                    1 => (-rng.gen_range(1.0..2.0), -rng.gen_range(0.0..0.9)),
                    _ => (rng.gen_range(0.0..0.9), rng.gen_range(1.0..2.0)),
                };
                let beta = crate::bounds::alpha_beta(l, u).unwrap().beta;
                let ambiguous = l < 0.0 && u > 0.0;
                let d = if ambiguous {
                    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
                } else {
                    [0.0; 3]
                };
                layer.push([
                    l,
                    u,
                    beta,
                    bias[j],
                    rng.gen_range(l..u),
                    rng.gen_range(0.0..u.max(0.1)),
                    d[0],
                    d[1],
                    d[2],
                ]);
            }
            act.push(layer);
        }
        let output = [-1.0, 2.0, 0.02, rng.gen_range(-1.0..2.0)];
        RawFeatures {
            input,
            act,
            output,
            input_back,
        }
    }

    fn ambiguous_candidates(raw: &RawFeatures) -> Vec<BranchDecision> {
        let mut out = Vec::new();
        for (layer, rows) in raw.act.iter().enumerate() {
            for (unit, row) in rows.iter().enumerate() {
                if row[0] < 0.0 && row[1] > 0.0 {
                    out.push(BranchDecision { layer, unit });
                }
            }
        }
        out
    }

    #[test]
    fn init_is_deterministic_and_counts_every_mlp() {
        let a = Gnn::init(8, 2, 11);
        let b = Gnn::init(8, 2, 11);
        assert_eq!(a.store.mats.len(), 25);
        assert_eq!(a.store.vecs.len(), 25);
        for (x, y) in a.store.mats.iter().zip(&b.store.mats) {
            assert_eq!(x, y);
        }
        assert!(a.store.vecs.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn inference_is_deterministic() {
        let net = toy_net();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = synthetic_features(&mut rng, &net);
        let graph = GnnGraph::new(&net, &raw, &FeatureNorm::identity()).unwrap();
        let gnn = Gnn::init(6, 2, 5);
        let cands = ambiguous_candidates(&raw);
        if cands.is_empty() {
            return;
        }
        let s1 = infer(&gnn, &net, &graph, &cands);
        let s2 = infer(&gnn, &net, &graph, &cands);
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scores_are_finite_on_random_graphs() {
        for seed in 0..20 {
            let net = toy_net();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = synthetic_features(&mut rng, &net);
            let graph = GnnGraph::new(&net, &raw, &FeatureNorm::identity()).unwrap();
            let gnn = Gnn::init(6, 2, seed + 100);
            let cands = ambiguous_candidates(&raw);
            let scores = infer(&gnn, &net, &graph, &cands);
            assert!(scores.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn permuting_hidden_units_permutes_scores() {
        let net = toy_net();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut raw = synthetic_features(&mut rng, &net);
        // Force every hidden unit ambiguous so the candidate sets align.
        for row in &mut raw.act[0] {
            row[0] = -0.5;
            row[1] = 0.5;
            row[2] = crate::bounds::alpha_beta(-0.5, 0.5).unwrap().beta;
        }
        let perm = [2usize, 0, 1];
        let layers = net.layers();
        let (w1, b1) = match &layers[0] {
            Layer::Dense { weight, bias } => (weight.clone(), bias.clone()),
            _ => unreachable!(),
        };
        let (w2, b2) = match &layers[1] {
            Layer::Dense { weight, bias } => (weight.clone(), bias.clone()),
            _ => unreachable!(),
        };
        let mut w1p = w1.clone();
        let mut b1p = b1.clone();
        let mut w2p = w2.clone();
        for (new, &old) in perm.iter().enumerate() {
            w1p.row_mut(new).assign(&w1.row(old));
            b1p[new] = b1[old];
            w2p.column_mut(new).assign(&w2.column(old));
        }
        let permuted_net = Network::new(vec![
            Layer::Dense {
                weight: w1p,
                bias: b1p,
            },
            Layer::Dense {
                weight: w2p,
                bias: b2,
            },
        ])
        .unwrap();
        let mut praw = raw.clone();
        for (new, &old) in perm.iter().enumerate() {
            praw.act[0][new] = raw.act[0][old];
            praw.act[0][new][3] = permuted_net.layers()[0].bias_flat()[new];
        }
        let gnn = Gnn::init(7, 2, 21);
        let norm = FeatureNorm::identity();
        let g = GnnGraph::new(&net, &raw, &norm).unwrap();
        let gp = GnnGraph::new(&permuted_net, &praw, &norm).unwrap();
        let cands: Vec<BranchDecision> = (0..3)
            .map(|unit| BranchDecision { layer: 0, unit })
            .collect();
        let base = infer(&gnn, &net, &g, &cands);
        let perm_scores = infer(&gnn, &permuted_net, &gp, &cands);
        for (new, &old) in perm.iter().enumerate() {
            assert!(
                (perm_scores[new] - base[old]).abs() < 1e-9,
                "permuted unit {new} should score like original {old}"
            );
        }
    }

    #[test]
    fn hinge_loss_matches_hand_values_and_zero_pair_case() {
        let net = toy_net();
        let gnn = Gnn::init(4, 1, 2);
        let mut tape = Tape::new(&net, &gnn.store);
        let s = tape.leaf(ndarray::arr2(&[[0.0], [2.0]]));
        let loss = tape.hinge_rank(s, vec![0, 1]);
        assert_eq!(tape.value(loss)[[0, 0]], 0.0);
        let s = tape.leaf(ndarray::arr2(&[[0.0], [0.0]]));
        let loss = tape.hinge_rank(s, vec![0, 1]);
        assert_eq!(tape.value(loss)[[0, 0]], 1.0);
        let s = tape.leaf(ndarray::arr2(&[[1.0], [0.0]]));
        let loss = tape.hinge_rank(s, vec![0, 1]);
        assert_eq!(tape.value(loss)[[0, 0]], 2.0);
        let s = tape.leaf(ndarray::arr2(&[[1.0], [0.0]]));
        let loss = tape.hinge_rank(s, vec![1, 1]);
        assert_eq!(tape.value(loss)[[0, 0]], 0.0);
        assert_eq!(hinge_pair_count(&[1, 1]), 0);
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let net = toy_net();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let raw = synthetic_features(&mut rng, &net);
        let graph = GnnGraph::new(&net, &raw, &FeatureNorm::identity()).unwrap();
        let mut gnn = Gnn::init(5, 2, 33);
        let cands = ambiguous_candidates(&raw);
        if cands.len() < 2 {
            panic!("fixture needs at least two ambiguous nodes");
        }
        let labels: Vec<usize> = (0..cands.len()).map(|i| i % 3).collect();
        let (_, pairs, grads) = hinge_loss_grad(&gnn, &net, &graph, &cands, &labels);
        assert!(pairs > 0);
        let h = 1e-5;
        let mut checked = 0;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(4);
        while checked < 12 {
            let mi = probe_rng.gen_range(0..gnn.store.mats.len());
            let r = probe_rng.gen_range(0..gnn.store.mats[mi].nrows());
            let c = probe_rng.gen_range(0..gnn.store.mats[mi].ncols());
            let orig = gnn.store.mats[mi][[r, c]];
            gnn.store.mats[mi][[r, c]] = orig + h;
            let (up, _, _) = hinge_loss_grad(&gnn, &net, &graph, &cands, &labels);
            gnn.store.mats[mi][[r, c]] = orig - h;
            let (down, _, _) = hinge_loss_grad(&gnn, &net, &graph, &cands, &labels);
            gnn.store.mats[mi][[r, c]] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.mats[mi][[r, c]];
            if fd.abs() < 1e-10 && an.abs() < 1e-10 {
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "param mats[{mi}][{r},{c}]: fd {fd} vs grad {an}");
            checked += 1;
        }
    }

    #[test]
    fn checkpoint_roundtrips_bytes() {
        let gnn = Gnn::init(4, 2, 7);
        let norm = FeatureNorm::identity();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_checkpoint(&p1, &gnn, &norm, 7).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.gnn.p, 4);
        assert_eq!(loaded.seed, 7);
        for (a, b) in loaded.gnn.store.mats.iter().zip(&gnn.store.mats) {
            assert_eq!(a, b);
        }
        save_checkpoint(&p2, &loaded.gnn, &loaded.norm, loaded.seed).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "reserialized checkpoint must be byte-identical"
        );
    }

    #[test]
    fn score_gap_gradient_points_downhill() {
        let net = toy_net();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut raw = synthetic_features(&mut rng, &net);
        for row in &mut raw.act[0] {
            row[0] = -0.5;
            row[1] = 0.5;
            row[2] = crate::bounds::alpha_beta(-0.5, 0.5).unwrap().beta;
        }
        let graph = GnnGraph::new(&net, &raw, &FeatureNorm::identity()).unwrap();
        let mut gnn = Gnn::init(5, 2, 13);
        let a = BranchDecision { layer: 0, unit: 0 };
        let b = BranchDecision { layer: 0, unit: 2 };
        let (gap0, grads) = score_gap_grad(&gnn, &net, &graph, a, b);
        let lr = 1e-3;
        for (m, g) in gnn.store.mats.iter_mut().zip(&grads.mats) {
            m.scaled_add(-lr, g);
        }
        for (v, g) in gnn.store.vecs.iter_mut().zip(&grads.vecs) {
            v.scaled_add(-lr, g);
        }
        let (gap1, _) = score_gap_grad(&gnn, &net, &graph, a, b);
        assert!(
            gap1 < gap0,
            "one descent step must shrink the gap: {gap0} -> {gap1}"
        );
    }
}
