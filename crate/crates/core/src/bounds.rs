//! Pre-activation bounds under branching decisions.
//!
//! Two bounding methods are exposed. [`interval_bounds`] pushes intervals
//! forward through the network. [`linbound_bounds`] additionally runs, for
//! every layer, a backward substitution pass in which each ambiguous ReLU is
//! replaced by two parallel lines of slope `alpha = u / (u - l)`: an upper
//! line with intercept `beta = -l * u / (u - l)` and a lower line through
//! the origin. The backward result is intersected with a one-step interval
//! bound at every layer, so linear-relaxation bounds are never looser than
//! interval bounds and never loosen when a split adds a decision.
//!
//! Decisions clip the decided node's own interval to the chosen half; bounds
//! of layers strictly after a split are recomputed, earlier ones are
//! inherited.

use crate::network::{InputBox, Layer, Network};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("invalid interval: lower {lower} > upper {upper}")]
    InvalidInterval { lower: f64, upper: f64 },
    #[error("non-finite interval endpoint")]
    NonFinite,
    #[error("decision at layer {layer}, unit {unit} contradicts its bounds")]
    InfeasibleSplit { layer: usize, unit: usize },
}

/// Branching state of one hidden ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionState {
    Undecided,
    /// `x_hat <= 0`, output fixed to zero.
    Blocked,
    /// `x_hat >= 0`, output equals the pre-activation.
    Passing,
}

/// Split decisions for every hidden ReLU layer. Layer `h` holds the states
/// of the pre-activations produced by affine layer `h` (0-based); the output
/// layer carries no decisions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReluDecisionMap {
    states: Vec<Vec<DecisionState>>,
}

impl ReluDecisionMap {
    pub fn undecided(net: &Network) -> Self {
        let states = (0..net.num_hidden())
            .map(|h| vec![DecisionState::Undecided; net.layer_out_size(h)])
            .collect();
        ReluDecisionMap { states }
    }

    pub fn get(&self, layer: usize, unit: usize) -> DecisionState {
        self.states[layer][unit]
    }

    pub fn set(&mut self, layer: usize, unit: usize, state: DecisionState) {
        self.states[layer][unit] = state;
    }

    pub fn num_layers(&self) -> usize {
        self.states.len()
    }

    pub fn layer(&self, layer: usize) -> &[DecisionState] {
        &self.states[layer]
    }

    pub fn decided_count(&self) -> usize {
        self.states
            .iter()
            .flatten()
            .filter(|s| **s != DecisionState::Undecided)
            .count()
    }

    /// Stable 64-bit fingerprint of the decision pattern (FNV-1a).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u64| {
            h ^= b;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (li, layer) in self.states.iter().enumerate() {
            for (ui, s) in layer.iter().enumerate() {
                let tag = match s {
                    DecisionState::Undecided => continue,
                    DecisionState::Blocked => 1,
                    DecisionState::Passing => 2,
                };
                eat(li as u64);
                eat(ui as u64);
                eat(tag);
            }
        }
        h
    }
}

/// Slope and upper intercept of the two parallel relaxation lines of one
/// ReLU: the output is bounded by `alpha * x_hat` from below and
/// `alpha * x_hat + beta` from above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxationParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Relaxation parameters of a ReLU whose pre-activation lies in `[l, u]`.
/// Degenerate intervals are decided by sign; `l = u = 0` counts as blocked.
pub fn alpha_beta(l: f64, u: f64) -> Result<RelaxationParams, BoundsError> {
    if !l.is_finite() || !u.is_finite() {
        return Err(BoundsError::NonFinite);
    }
    if l > u {
        return Err(BoundsError::InvalidInterval { lower: l, upper: u });
    }
    if u <= 0.0 {
        Ok(RelaxationParams {
            alpha: 0.0,
            beta: 0.0,
        })
    } else if l >= 0.0 {
        Ok(RelaxationParams {
            alpha: 1.0,
            beta: 0.0,
        })
    } else {
        let alpha = u / (u - l);
        Ok(RelaxationParams {
            alpha,
            beta: -l * alpha,
        })
    }
}

/// Lower and upper bounds of every pre-activation vector, indexed by the
/// affine layer that produces it (`0..depth`). The last entry bounds the
/// network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub lower: Vec<Array1<f64>>,
    pub upper: Vec<Array1<f64>>,
}

impl LayerBounds {
    pub fn num_layers(&self) -> usize {
        self.lower.len()
    }

    pub fn output_lower(&self) -> f64 {
        *self.lower.last().unwrap().first().unwrap()
    }

    pub fn output_upper(&self) -> f64 {
        *self.upper.last().unwrap().first().unwrap()
    }

    /// Whether the node is strictly unstable according to these bounds.
    pub fn is_ambiguous(&self, layer: usize, unit: usize) -> bool {
        self.lower[layer][unit] < 0.0 && self.upper[layer][unit] > 0.0
    }

    /// Undecided nodes whose interval straddles zero, in `(layer, unit)`
    /// order; these are the valid split candidates.
    pub fn ambiguous_nodes(&self, decisions: &ReluDecisionMap) -> Vec<(usize, usize)> {
        let mut nodes = Vec::new();
        for layer in 0..decisions.num_layers() {
            for unit in 0..self.lower[layer].len() {
                if decisions.get(layer, unit) == DecisionState::Undecided
                    && self.is_ambiguous(layer, unit)
                {
                    nodes.push((layer, unit));
                }
            }
        }
        nodes
    }

    /// Relaxation parameters of a hidden node, after decision clipping.
    pub fn relaxation(&self, layer: usize, unit: usize) -> Result<RelaxationParams, BoundsError> {
        alpha_beta(self.lower[layer][unit], self.upper[layer][unit])
    }
}

/// Clips a pre-activation interval to the half chosen by `state`. Inversions
/// up to `1e-9` collapse to a point; larger ones mean the branch is empty.
fn clip_interval(
    l: f64,
    u: f64,
    state: DecisionState,
    layer: usize,
    unit: usize,
) -> Result<(f64, f64), BoundsError> {
    let (mut cl, mut cu) = match state {
        DecisionState::Undecided => (l, u),
        DecisionState::Blocked => (l, u.min(0.0)),
        DecisionState::Passing => (l.max(0.0), u),
    };
    if cl > cu {
        if cl - cu > 1e-9 {
            return Err(BoundsError::InfeasibleSplit { layer, unit });
        }
        let mid = 0.5 * (cl + cu);
        cl = mid;
        cu = mid;
    }
    Ok((cl, cu))
}

fn clip_layer(
    lower: &mut Array1<f64>,
    upper: &mut Array1<f64>,
    decisions: &ReluDecisionMap,
    layer: usize,
) -> Result<(), BoundsError> {
    if layer >= decisions.num_layers() {
        return Ok(());
    }
    for unit in 0..lower.len() {
        let (l, u) = clip_interval(
            lower[unit],
            upper[unit],
            decisions.get(layer, unit),
            layer,
            unit,
        )?;
        lower[unit] = l;
        upper[unit] = u;
    }
    Ok(())
}

/// One-step interval image of a layer given post-activation intervals of its
/// inputs, via midpoint and radius.
fn interval_step(layer: &Layer, post_lo: &Array1<f64>, post_up: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let mid = (post_lo + post_up) * 0.5;
    let rad = (post_up - post_lo) * 0.5;
    let center = layer.apply_vec(mid.view()) + layer.bias_flat();
    let spread = layer.apply_abs_vec(rad.view());
    (&center - &spread, center + spread)
}

/// Forward interval propagation under the given decisions. Decided nodes
/// clip their own interval to the chosen half before it is used downstream.
pub fn interval_bounds(
    net: &Network,
    domain: &InputBox,
    decisions: &ReluDecisionMap,
) -> Result<LayerBounds, BoundsError> {
    let mut lower = Vec::with_capacity(net.depth());
    let mut upper = Vec::with_capacity(net.depth());
    let (mut post_lo, mut post_up) = (domain.lower.clone(), domain.upper.clone());
    for (i, layer) in net.layers().iter().enumerate() {
        let (mut lo, mut up) = interval_step(layer, &post_lo, &post_up);
        clip_layer(&mut lo, &mut up, decisions, i)?;
        if i + 1 < net.depth() {
            post_lo = lo.mapv(|v| v.max(0.0));
            post_up = up.mapv(|v| v.max(0.0));
        }
        lower.push(lo);
        upper.push(up);
    }
    Ok(LayerBounds { lower, upper })
}

/// Dense unrolled weight matrix of a layer (conv layers expanded).
fn unrolled_weight(layer: &Layer) -> Array2<f64> {
    match layer {
        Layer::Dense { weight, .. } => weight.clone(),
        Layer::Conv2d { .. } => {
            let mut m = Array2::zeros((layer.out_size(), layer.in_size()));
            for out in 0..layer.out_size() {
                for (j, w) in layer.row_coeffs(out) {
                    m[[out, j]] += w;
                }
            }
            m
        }
    }
}

/// State of a backward substitution pass: a coefficient matrix over the
/// current layer's units plus an accumulated constant per target row.
struct BackwardState {
    coeffs: Array2<f64>,
    consts: Array1<f64>,
}

impl BackwardState {
    /// Substitutes the relaxation lines of ReLU layer `h`. Both lines share
    /// the slope, so the coefficients scale uniformly; only the intercept
    /// side depends on the bound direction.
    fn pass_relu(&mut self, relax: &[RelaxationParams], lower_side: bool) {
        for (r, mut row) in self.coeffs.rows_mut().into_iter().enumerate() {
            let mut add = 0.0;
            for (j, c) in row.iter_mut().enumerate() {
                let picked = if lower_side {
                    c.min(0.0)
                } else {
                    c.max(0.0)
                };
                add += picked * relax[j].beta;
                *c *= relax[j].alpha;
            }
            self.consts[r] += add;
        }
    }

    /// Substitutes affine layer `layer`, moving the coefficients onto its
    /// inputs and folding the bias into the constants.
    fn pass_affine(&mut self, layer: &Layer) {
        self.consts = &self.consts + &self.coeffs.dot(&layer.bias_flat());
        let carried = crate::network::linear_map_transpose(layer, self.coeffs.t());
        self.coeffs = carried.t().to_owned();
    }

    /// Concretises the linear functions over the input box.
    fn concretize(&self, domain: &InputBox, lower_side: bool) -> Array1<f64> {
        let mut out = self.consts.clone();
        for (r, row) in self.coeffs.rows().into_iter().enumerate() {
            let mut acc = 0.0;
            for (j, &c) in row.iter().enumerate() {
                let (a, b) = (c * domain.lower[j], c * domain.upper[j]);
                acc += if lower_side { a.min(b) } else { a.max(b) };
            }
            out[r] += acc;
        }
        out
    }
}

/// Relaxation parameters of every unit of a stored hidden layer.
fn layer_relaxations(bounds: &LayerBounds, layer: usize) -> Result<Vec<RelaxationParams>, BoundsError> {
    (0..bounds.lower[layer].len())
        .map(|j| bounds.relaxation(layer, j))
        .collect()
}

/// Backward-substitution bounds for the outputs of affine layer `target`,
/// using the stored bounds of all earlier layers.
fn backward_layer(
    net: &Network,
    domain: &InputBox,
    stored: &LayerBounds,
    target: usize,
) -> Result<(Array1<f64>, Array1<f64>), BoundsError> {
    let layer = &net.layers()[target];
    let init = BackwardState {
        coeffs: unrolled_weight(layer),
        consts: layer.bias_flat(),
    };
    let mut lo_state = BackwardState {
        coeffs: init.coeffs.clone(),
        consts: init.consts.clone(),
    };
    let mut up_state = init;
    for h in (0..target).rev() {
        let relax = layer_relaxations(stored, h)?;
        lo_state.pass_relu(&relax, true);
        up_state.pass_relu(&relax, false);
        lo_state.pass_affine(&net.layers()[h]);
        up_state.pass_affine(&net.layers()[h]);
    }
    Ok((
        lo_state.concretize(domain, true),
        up_state.concretize(domain, false),
    ))
}

fn combined_bounds(
    net: &Network,
    domain: &InputBox,
    decisions: &ReluDecisionMap,
    inherit: Option<(&LayerBounds, usize)>,
    intersect_interval: bool,
) -> Result<LayerBounds, BoundsError> {
    let mut acc = LayerBounds {
        lower: Vec::with_capacity(net.depth()),
        upper: Vec::with_capacity(net.depth()),
    };
    for i in 0..net.depth() {
        if let Some((parent, split_layer)) = inherit {
            if i < split_layer {
                acc.lower.push(parent.lower[i].clone());
                acc.upper.push(parent.upper[i].clone());
                continue;
            }
            if i == split_layer {
                let mut lo = parent.lower[i].clone();
                let mut up = parent.upper[i].clone();
                clip_layer(&mut lo, &mut up, decisions, i)?;
                acc.lower.push(lo);
                acc.upper.push(up);
                continue;
            }
        }
        let (mut lo, mut up) = backward_layer(net, domain, &acc, i)?;
        if intersect_interval && i > 0 {
            let post_lo = acc.lower[i - 1].mapv(|v| v.max(0.0));
            let post_up = acc.upper[i - 1].mapv(|v| v.max(0.0));
            let (step_lo, step_up) = interval_step(&net.layers()[i], &post_lo, &post_up);
            lo.zip_mut_with(&step_lo, |a, &b| *a = a.max(b));
            up.zip_mut_with(&step_up, |a, &b| *a = a.min(b));
        }
        if let Some((parent, _)) = inherit {
            lo.zip_mut_with(&parent.lower[i], |a, &b| *a = a.max(b));
            up.zip_mut_with(&parent.upper[i], |a, &b| *a = a.min(b));
        }
        clip_layer(&mut lo, &mut up, decisions, i)?;
        for j in 0..lo.len() {
            if lo[j] > up[j] {
                if lo[j] - up[j] > 1e-9 {
                    return Err(BoundsError::InfeasibleSplit { layer: i, unit: j });
                }
                let mid = 0.5 * (lo[j] + up[j]);
                lo[j] = mid;
                up[j] = mid;
            }
        }
        acc.lower.push(lo);
        acc.upper.push(up);
    }
    Ok(acc)
}

/// Linear-relaxation bounds: per layer, the tighter of the backward
/// substitution pass and a one-step interval image, computed layer by layer
/// so earlier results feed later relaxations.
pub fn linbound_bounds(
    net: &Network,
    domain: &InputBox,
    decisions: &ReluDecisionMap,
) -> Result<LayerBounds, BoundsError> {
    combined_bounds(net, domain, decisions, None, true)
}

/// Pure backward-substitution concretisation, without the interval
/// intersection. Useful to inspect the relaxation lines themselves; the
/// production bound is [`linbound_bounds`].
pub fn backward_substitution_bounds(
    net: &Network,
    domain: &InputBox,
    decisions: &ReluDecisionMap,
) -> Result<LayerBounds, BoundsError> {
    combined_bounds(net, domain, decisions, None, false)
}

/// Child bounds after deciding `(split_layer, split_unit)`: layers before
/// the split are inherited, the split layer is clipped, and every later
/// layer is recomputed and intersected with the parent's bounds, so no bound
/// ever loosens.
pub fn recompute_bounds_after_split(
    net: &Network,
    domain: &InputBox,
    decisions: &ReluDecisionMap,
    parent: &LayerBounds,
    split_layer: usize,
) -> Result<LayerBounds, BoundsError> {
    combined_bounds(net, domain, decisions, Some((parent, split_layer)), true)
}

/// For each hidden node, the coefficient its relaxation intercept carries in
/// the backward substitution pass of the output lower bound: the node's
/// additive contribution to the relaxed bound is `coefficient * beta`.
/// Nodes that are not ambiguous report zero.
pub fn output_intercept_coefficients(
    net: &Network,
    domain_bounds: &LayerBounds,
    decisions: &ReluDecisionMap,
) -> Result<Vec<Array1<f64>>, BoundsError> {
    let target = net.depth() - 1;
    let layer = &net.layers()[target];
    let mut state = BackwardState {
        coeffs: unrolled_weight(layer),
        consts: layer.bias_flat(),
    };
    let mut coeffs: Vec<Array1<f64>> = (0..net.num_hidden())
        .map(|h| Array1::zeros(net.layer_out_size(h)))
        .collect();
    for h in (0..target).rev() {
        for j in 0..net.layer_out_size(h) {
            if decisions.get(h, j) == DecisionState::Undecided && domain_bounds.is_ambiguous(h, j) {
                coeffs[h][j] = state.coeffs[[0, j]].min(0.0);
            }
        }
        let relax = layer_relaxations(domain_bounds, h)?;
        state.pass_relu(&relax, true);
        state.pass_affine(&net.layers()[h]);
    }
    Ok(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn alpha_beta_known_values() {
        let r = alpha_beta(-1.0, 1.0).unwrap();
        assert_eq!((r.alpha, r.beta), (0.5, 0.5));
        let r = alpha_beta(-1.0, 3.0).unwrap();
        assert_eq!((r.alpha, r.beta), (0.75, 0.75));
        let r = alpha_beta(-3.0, 0.0).unwrap();
        assert_eq!((r.alpha, r.beta), (0.0, 0.0));
        let r = alpha_beta(0.0, 0.0).unwrap();
        assert_eq!((r.alpha, r.beta), (0.0, 0.0));
        let r = alpha_beta(2.0, 2.0).unwrap();
        assert_eq!((r.alpha, r.beta), (1.0, 0.0));
        let r = alpha_beta(-2.0, -2.0).unwrap();
        assert_eq!((r.alpha, r.beta), (0.0, 0.0));
        assert!(alpha_beta(1.0, -1.0).is_err());
        assert!(alpha_beta(f64::NAN, 1.0).is_err());
        assert!(alpha_beta(f64::NEG_INFINITY, 1.0).is_err());
    }

    #[test]
    fn single_relu_backward_substitution_example() {
        // f(x) = ReLU(x) on [-1, 1]: the relaxation lines have slope 1/2, so
        // the raw backward concretisation of the output is [-0.5, 1].
        let net = Network::new(vec![
            Layer::Dense {
                weight: array![[1.0]],
                bias: array![0.0],
            },
            Layer::Dense {
                weight: array![[1.0]],
                bias: array![0.0],
            },
        ])
        .unwrap();
        let domain = InputBox {
            lower: array![-1.0],
            upper: array![1.0],
        };
        let dec = ReluDecisionMap::undecided(&net);
        let raw = backward_substitution_bounds(&net, &domain, &dec).unwrap();
        assert!((raw.output_lower() - -0.5).abs() < 1e-12);
        assert!((raw.output_upper() - 1.0).abs() < 1e-12);
        // The production bound additionally intersects with the interval
        // image, which knows the ReLU output is nonnegative.
        let prod = linbound_bounds(&net, &domain, &dec).unwrap();
        assert!((prod.output_lower() - 0.0).abs() < 1e-12);
        assert!((prod.output_upper() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decided_clips_propagate() {
        let net = Network::new(vec![
            Layer::Dense {
                weight: array![[1.0]],
                bias: array![0.0],
            },
            Layer::Dense {
                weight: array![[2.0]],
                bias: array![0.0],
            },
        ])
        .unwrap();
        let domain = InputBox {
            lower: array![-1.0],
            upper: array![1.0],
        };
        let mut dec = ReluDecisionMap::undecided(&net);
        dec.set(0, 0, DecisionState::Blocked);
        let b = interval_bounds(&net, &domain, &dec).unwrap();
        assert_eq!(b.lower[0][0], -1.0);
        assert_eq!(b.upper[0][0], 0.0);
        assert_eq!(b.lower[1][0], 0.0);
        assert_eq!(b.upper[1][0], 0.0);
        dec.set(0, 0, DecisionState::Passing);
        let b = interval_bounds(&net, &domain, &dec).unwrap();
        assert_eq!((b.lower[0][0], b.upper[0][0]), (0.0, 1.0));
        assert_eq!((b.lower[1][0], b.upper[1][0]), (0.0, 2.0));
    }

    #[test]
    fn contradictory_decision_reports_infeasible() {
        let net = Network::new(vec![
            Layer::Dense {
                weight: array![[1.0]],
                bias: array![5.0],
            },
            Layer::Dense {
                weight: array![[1.0]],
                bias: array![0.0],
            },
        ])
        .unwrap();
        let domain = InputBox {
            lower: array![-1.0],
            upper: array![1.0],
        };
        let mut dec = ReluDecisionMap::undecided(&net);
        dec.set(0, 0, DecisionState::Blocked);
        let err = interval_bounds(&net, &domain, &dec).unwrap_err();
        assert!(matches!(
            err,
            BoundsError::InfeasibleSplit { layer: 0, unit: 0 }
        ));
    }

    #[test]
    fn fingerprint_distinguishes_decision_patterns() {
        let net = Network::new(vec![
            Layer::Dense {
                weight: array![[1.0], [1.0]],
                bias: array![0.0, 0.0],
            },
            Layer::Dense {
                weight: array![[1.0, 1.0]],
                bias: array![0.0],
            },
        ])
        .unwrap();
        let mut a = ReluDecisionMap::undecided(&net);
        let mut b = a.clone();
        a.set(0, 0, DecisionState::Blocked);
        b.set(0, 1, DecisionState::Blocked);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), ReluDecisionMap::undecided(&net).fingerprint());
    }
}
