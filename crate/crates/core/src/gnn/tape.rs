//! Eagerly evaluated expression tape with reverse-mode differentiation.
//!
//! Every value is a dense `(rows, cols)` matrix; rows index nodes of one
//! network layer, columns index embedding or feature dimensions. The tape
//! records enough structure to propagate adjoints back to every learnable
//! tensor in one sweep, sharing a single code path between plain inference
//! and gradient computation.

use super::{BiasId, ParamStore, WeightId};
use crate::network::{linear_map, linear_map_transpose, Network};
use ndarray::{Array1, Array2, Axis};

pub type ValueId = usize;

enum Op {
    Leaf,
    Linear { x: ValueId, w: WeightId, b: BiasId },
    Relu { x: ValueId },
    ConcatCols { parts: Vec<ValueId> },
    ConcatRows { parts: Vec<ValueId> },
    GatherRows { x: ValueId, rows: Vec<usize> },
    RowScale { x: ValueId, scale: Array1<f64> },
    LayerMap { x: ValueId, layer: usize },
    LayerMapT { x: ValueId, layer: usize },
    HingeRank { s: ValueId, labels: Vec<usize> },
    ScoreGap { s: ValueId, gnn: usize, heuristic: usize },
}

struct TapeNode {
    value: Array2<f64>,
    op: Op,
}

/// Parameter gradients laid out exactly like [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub mats: Vec<Array2<f64>>,
    pub vecs: Vec<Array1<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            mats: store
                .mats
                .iter()
                .map(|m| Array2::zeros(m.raw_dim()))
                .collect(),
            vecs: store
                .vecs
                .iter()
                .map(|v| Array1::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, factor: f64) {
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            a.scaled_add(factor, b);
        }
        for (a, b) in self.vecs.iter_mut().zip(&other.vecs) {
            a.scaled_add(factor, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(|m| m.iter().all(|x| x.is_finite()))
            && self.vecs.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Gradient values flattened in [`crate::gnn::Gnn::params_flat`] order.
    pub fn flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for m in &self.mats {
            flat.extend(m.iter().copied());
        }
        for v in &self.vecs {
            flat.extend(v.iter().copied());
        }
        flat
    }
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    net: &'a Network,
    nodes: Vec<TapeNode>,
}

impl<'a> Tape<'a> {
    pub fn new(net: &'a Network, store: &'a ParamStore) -> Self {
        Tape {
            store,
            net,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: ValueId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> ValueId {
        self.nodes.push(TapeNode { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn linear(&mut self, x: ValueId, w: WeightId, b: BiasId) -> ValueId {
        let wm = &self.store.mats[w.0];
        let bv = &self.store.vecs[b.0];
        let mut out = self.nodes[x].value.dot(&wm.t());
        for mut row in out.rows_mut() {
            row += bv;
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = self.nodes[x].value.mapv(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn concat_cols(&mut self, parts: Vec<ValueId>) -> ValueId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("column concat");
        self.push(out, Op::ConcatCols { parts })
    }

    pub fn concat_rows(&mut self, parts: Vec<ValueId>) -> ValueId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("row concat");
        self.push(out, Op::ConcatRows { parts })
    }

    pub fn gather_rows(&mut self, x: ValueId, rows: Vec<usize>) -> ValueId {
        let out = self.nodes[x].value.select(Axis(0), &rows);
        self.push(out, Op::GatherRows { x, rows })
    }

    pub fn row_scale(&mut self, x: ValueId, scale: Array1<f64>) -> ValueId {
        let mut out = self.nodes[x].value.clone();
        for (mut row, &s) in out.rows_mut().into_iter().zip(scale.iter()) {
            row *= s;
        }
        self.push(out, Op::RowScale { x, scale })
    }

    /// Applies hidden/output layer `layer`'s weight (no bias) down each
    /// embedding column.
    pub fn layer_map(&mut self, x: ValueId, layer: usize) -> ValueId {
        let out = linear_map(&self.net.layers()[layer], self.nodes[x].value.view());
        self.push(out, Op::LayerMap { x, layer })
    }

    /// Transposed-weight counterpart of [`Tape::layer_map`].
    pub fn layer_map_t(&mut self, x: ValueId, layer: usize) -> ValueId {
        let out = linear_map_transpose(&self.net.layers()[layer], self.nodes[x].value.view());
        self.push(out, Op::LayerMapT { x, layer })
    }

    /// Mean hinge loss over all candidate pairs whose labels differ, on an
    /// `(n, 1)` score column. Zero (with no gradient) when no pair ranks.
    pub fn hinge_rank(&mut self, s: ValueId, labels: Vec<usize>) -> ValueId {
        let scores = &self.nodes[s].value;
        let k = hinge_pair_count(&labels);
        let mut loss = 0.0;
        if k > 0 {
            for i in 0..labels.len() {
                for j in 0..labels.len() {
                    if labels[j] > labels[i] {
                        loss += (1.0 - (scores[[j, 0]] - scores[[i, 0]])).max(0.0);
                    }
                }
            }
            loss /= k as f64;
        }
        self.push(Array2::from_elem((1, 1), loss), Op::HingeRank { s, labels })
    }

    /// `score[gnn] - score[heuristic]`: the differentiable part of the
    /// online fine-tuning loss.
    pub fn score_gap(&mut self, s: ValueId, gnn: usize, heuristic: usize) -> ValueId {
        let scores = &self.nodes[s].value;
        let gap = scores[[gnn, 0]] - scores[[heuristic, 0]];
        self.push(Array2::from_elem((1, 1), gap), Op::ScoreGap { s, gnn, heuristic })
    }

    /// Reverse sweep from a `(1, 1)` root, accumulating parameter gradients.
    pub fn backward(&self, root: ValueId) -> Grads {
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "root must be scalar");
        let mut grads = Grads::zeros_like(self.store);
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[root] = Some(Array2::ones((1, 1)));
        for id in (0..=root).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wm = &self.store.mats[w.0];
                    accumulate(&mut adj[*x], g.dot(wm));
                    grads.mats[w.0] += &g.t().dot(xv);
                    grads.vecs[b.0] += &g.sum_axis(Axis(0));
                }
                Op::Relu { x } => {
                    let mask = self.nodes[id].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adj[*x], g * mask);
                }
                Op::ConcatCols { parts } => {
                    let mut col = 0;
                    for &part in parts {
                        let w = self.nodes[part].value.ncols();
                        let piece = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        accumulate(&mut adj[part], piece);
                        col += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut row = 0;
                    for &part in parts {
                        let h = self.nodes[part].value.nrows();
                        let piece = g.slice(ndarray::s![row..row + h, ..]).to_owned();
                        accumulate(&mut adj[part], piece);
                        row += h;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let mut dx = Array2::zeros(self.nodes[*x].value.raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut target = dx.row_mut(r);
                        target += &g.row(k);
                    }
                    accumulate(&mut adj[*x], dx);
                }
                Op::RowScale { x, scale } => {
                    let mut dx = g.clone();
                    for (mut row, &s) in dx.rows_mut().into_iter().zip(scale.iter()) {
                        row *= s;
                    }
                    accumulate(&mut adj[*x], dx);
                }
                Op::LayerMap { x, layer } => {
                    let dx = linear_map_transpose(&self.net.layers()[*layer], g.view());
                    accumulate(&mut adj[*x], dx);
                }
                Op::LayerMapT { x, layer } => {
                    let dx = linear_map(&self.net.layers()[*layer], g.view());
                    accumulate(&mut adj[*x], dx);
                }
                Op::HingeRank { s, labels } => {
                    let k = hinge_pair_count(labels);
                    if k == 0 {
                        continue;
                    }
                    let scores = &self.nodes[*s].value;
                    let scale = g[[0, 0]] / k as f64;
                    let mut ds = Array2::zeros(scores.raw_dim());
                    for i in 0..labels.len() {
                        for j in 0..labels.len() {
                            if labels[j] > labels[i]
                                && 1.0 - (scores[[j, 0]] - scores[[i, 0]]) > 0.0
                            {
                                ds[[j, 0]] -= scale;
                                ds[[i, 0]] += scale;
                            }
                        }
                    }
                    accumulate(&mut adj[*s], ds);
                }
                Op::ScoreGap { s, gnn, heuristic } => {
                    let mut ds = Array2::zeros(self.nodes[*s].value.raw_dim());
                    ds[[*gnn, 0]] += g[[0, 0]];
                    ds[[*heuristic, 0]] -= g[[0, 0]];
                    accumulate(&mut adj[*s], ds);
                }
            }
        }
        grads
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

/// Number of ordered label pairs `(i, j)` with `Y_j > Y_i`.
pub fn hinge_pair_count(labels: &[usize]) -> usize {
    let mut k = 0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[j] > labels[i] {
                k += 1;
            }
        }
    }
    k
}
