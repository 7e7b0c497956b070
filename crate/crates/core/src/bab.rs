//! Branch-and-bound search over ReLU activation splits.
//!
//! The search maintains a priority queue of subdomains ordered by their
//! relaxed output lower bound (lowest first, insertion order breaking ties).
//! A subdomain whose lower bound clears `-prune_tol` is discarded; a concrete
//! input whose output falls below `-prune_tol` falsifies the property; an
//! empty queue proves it. Branching picks an ambiguous ReLU, fixes it to
//! blocked in one child and passing in the other, and re-tightens bounds.

use crate::bounds::{
    linbound_bounds, recompute_bounds_after_split, BoundsError, DecisionState, LayerBounds,
    ReluDecisionMap,
};
use crate::lp::{output_lower_bound, LpError, PlanetOutcome, PlanetSolution};
use crate::network::{InputBox, Network};
use ndarray::Array1;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BabError {
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Gnn(#[from] crate::gnn::GnnError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error("branching strategy returned non-ambiguous node at layer {layer}, unit {unit}")]
    BadBranch { layer: usize, unit: usize },
}

/// The ReLU chosen for a split.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub struct BranchDecision {
    pub layer: usize,
    pub unit: usize,
}

/// A region of the search: the input box, the activation decisions taken so
/// far, the bounds they induce, and the relaxation results on that region.
#[derive(Debug, Clone)]
pub struct Subdomain {
    pub decisions: ReluDecisionMap,
    pub bounds: LayerBounds,
    /// Relaxed output minimum; `+inf` when the region is empty.
    pub lower_bound: f64,
    /// Concrete output at `best_input`, an upper bound on the true minimum.
    pub upper_bound: f64,
    pub best_input: Array1<f64>,
    pub relaxation: Option<Box<PlanetSolution>>,
    pub depth: usize,
}

impl Subdomain {
    pub fn is_infeasible(&self) -> bool {
        self.lower_bound == f64::INFINITY
    }

    pub fn ambiguous_nodes(&self) -> Vec<BranchDecision> {
        self.bounds
            .ambiguous_nodes(&self.decisions)
            .into_iter()
            .map(|(layer, unit)| BranchDecision { layer, unit })
            .collect()
    }
}

/// Computes bounds and the relaxation LP for a decision set, producing a
/// fully scored subdomain. Empty regions come back with infinite bounds.
pub fn evaluate_subdomain(
    net: &Network,
    domain: &InputBox,
    decisions: ReluDecisionMap,
    inherit: Option<(&LayerBounds, usize)>,
    depth: usize,
) -> Result<Subdomain, BabError> {
    let bounds = match inherit {
        Some((parent, split_layer)) => {
            match recompute_bounds_after_split(net, domain, &decisions, parent, split_layer) {
                Ok(b) => b,
                Err(BoundsError::InfeasibleSplit { .. }) => {
                    return Ok(infeasible_subdomain(net, domain, decisions, depth))
                }
                Err(e) => return Err(e.into()),
            }
        }
        None => match linbound_bounds(net, domain, &decisions) {
            Ok(b) => b,
            Err(BoundsError::InfeasibleSplit { .. }) => {
                return Ok(infeasible_subdomain(net, domain, decisions, depth))
            }
            Err(e) => return Err(e.into()),
        },
    };
    match output_lower_bound(net, domain, &bounds, &decisions)? {
        PlanetOutcome::InfeasibleSubdomain => {
            Ok(infeasible_subdomain(net, domain, decisions, depth))
        }
        PlanetOutcome::Feasible(sol) => {
            let witness = domain.project(sol.input.view());
            let upper = net.eval_scalar(witness.view())?;
            Ok(Subdomain {
                decisions,
                bounds,
                lower_bound: sol.lower_bound,
                upper_bound: upper,
                best_input: witness,
                relaxation: Some(sol),
                depth,
            })
        }
    }
}

fn infeasible_subdomain(
    net: &Network,
    domain: &InputBox,
    decisions: ReluDecisionMap,
    depth: usize,
) -> Subdomain {
    let center = (&domain.lower + &domain.upper) * 0.5;
    Subdomain {
        decisions,
        bounds: LayerBounds {
            lower: Vec::new(),
            upper: Vec::new(),
        },
        lower_bound: f64::INFINITY,
        upper_bound: f64::INFINITY,
        best_input: center,
        relaxation: None,
        depth: depth.max(net.num_hidden()),
    }
}

/// Fixes `decision` to blocked and passing, returning the two scored
/// children `[blocked, passing]`.
pub fn split_relu(
    net: &Network,
    domain: &InputBox,
    parent: &Subdomain,
    decision: BranchDecision,
) -> Result<[Subdomain; 2], BabError> {
    let mut out = Vec::with_capacity(2);
    for state in [DecisionState::Blocked, DecisionState::Passing] {
        let mut decisions = parent.decisions.clone();
        decisions.set(decision.layer, decision.unit, state);
        out.push(evaluate_subdomain(
            net,
            domain,
            decisions,
            Some((&parent.bounds, decision.layer)),
            parent.depth + 1,
        )?);
    }
    let [a, b] = <[Subdomain; 2]>::try_from(out).expect("two children");
    Ok([a, b])
}

/// Relative tightening of a split: how far the two children move the
/// parent's relaxed bound toward zero, normalised so that 0 means no
/// progress and 1 means both children are pruned outright.
pub fn improvement(parent_lb: f64, child1_lb: f64, child2_lb: f64) -> f64 {
    if !(parent_lb < 0.0) {
        return 0.0;
    }
    let num = child1_lb.min(0.0) + child2_lb.min(0.0) - 2.0 * parent_lb;
    (num / (-2.0 * parent_lb)).clamp(0.0, 1.0)
}

/// What the strategy decided for one subdomain. Strategies that already
/// evaluated the children (strong branching, the fail-safe) hand them back
/// so the search does not recompute them.
pub struct StrategyChoice {
    pub decision: BranchDecision,
    pub used_gnn: bool,
    pub children: Option<[Subdomain; 2]>,
}

/// Everything a strategy may look at when choosing a split.
pub struct BranchContext<'a> {
    pub net: &'a Network,
    pub domain: &'a InputBox,
    pub subdomain: &'a Subdomain,
    pub candidates: &'a [BranchDecision],
}

pub trait BranchingStrategy {
    fn choose(&mut self, ctx: &BranchContext<'_>) -> Result<StrategyChoice, BabError>;
}

#[derive(Debug, Clone)]
pub struct BabConfig {
    pub timeout: Option<Duration>,
    /// Bounds within this tolerance of zero count as nonnegative.
    pub prune_tol: f64,
    pub max_branches: Option<u64>,
}

impl Default for BabConfig {
    fn default() -> Self {
        BabConfig {
            timeout: Some(Duration::from_secs(60)),
            prune_tol: 1e-6,
            max_branches: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyStatus {
    /// The output is nonnegative on the whole box.
    Verified,
    /// A concrete input drives the output below zero.
    Falsified,
    Timeout,
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub status: VerifyStatus,
    pub branch_count: u64,
    pub visited: u64,
    pub elapsed: Duration,
    pub counterexample: Option<Array1<f64>>,
    /// Splits decided by the network vs. splits decided in total, when the
    /// strategy reports it.
    pub gnn_decided: u64,
    pub total_decided: u64,
}

impl VerifyOutcome {
    pub fn gnn_usage_ratio(&self) -> f64 {
        if self.total_decided == 0 {
            0.0
        } else {
            self.gnn_decided as f64 / self.total_decided as f64
        }
    }
}

struct QueueEntry {
    lb: f64,
    seq: u64,
    sub: Box<Subdomain>,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.lb == other.lb && self.seq == other.seq
    }
}
impl Eq for QueueEntry {}
impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueEntry {
    // BinaryHeap is a max-heap; invert so the lowest bound (then the oldest
    // entry) surfaces first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .lb
            .total_cmp(&self.lb)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

pub fn verify(
    net: &Network,
    domain: &InputBox,
    strategy: &mut dyn BranchingStrategy,
    config: &BabConfig,
) -> Result<VerifyOutcome, BabError> {
    verify_with_observer(net, domain, strategy, config, &mut |_| {})
}

/// Runs the search, invoking `observer` on every subdomain popped for
/// branching (after the prune and falsification checks).
pub fn verify_with_observer(
    net: &Network,
    domain: &InputBox,
    strategy: &mut dyn BranchingStrategy,
    config: &BabConfig,
    observer: &mut dyn FnMut(&Subdomain),
) -> Result<VerifyOutcome, BabError> {
    let start = Instant::now();
    let tol = config.prune_tol;
    let mut branch_count = 0u64;
    let mut visited = 0u64;
    let mut gnn_decided = 0u64;
    let mut total_decided = 0u64;
    let mut seq = 0u64;
    let mut queue: BinaryHeap<QueueEntry> = BinaryHeap::new();

    let finish = |status: VerifyStatus,
                  counterexample: Option<Array1<f64>>,
                  branch_count: u64,
                  visited: u64,
                  gnn_decided: u64,
                  total_decided: u64| VerifyOutcome {
        status,
        branch_count,
        visited,
        elapsed: start.elapsed(),
        counterexample,
        gnn_decided,
        total_decided,
    };

    let root = evaluate_subdomain(net, domain, ReluDecisionMap::undecided(net), None, 0)?;
    if root.upper_bound < -tol {
        let cx = root.best_input.clone();
        return Ok(finish(VerifyStatus::Falsified, Some(cx), 0, 0, 0, 0));
    }
    if root.lower_bound >= -tol {
        return Ok(finish(VerifyStatus::Verified, None, 0, 0, 0, 0));
    }
    queue.push(QueueEntry {
        lb: root.lower_bound,
        seq,
        sub: Box::new(root),
    });
    seq += 1;

    while let Some(entry) = queue.pop() {
        if let Some(limit) = config.timeout {
            if start.elapsed() >= limit {
                return Ok(finish(
                    VerifyStatus::Timeout,
                    None,
                    branch_count,
                    visited,
                    gnn_decided,
                    total_decided,
                ));
            }
        }
        if let Some(max) = config.max_branches {
            if branch_count >= max {
                return Ok(finish(
                    VerifyStatus::Timeout,
                    None,
                    branch_count,
                    visited,
                    gnn_decided,
                    total_decided,
                ));
            }
        }
        let sub = entry.sub;
        visited += 1;
        observer(&sub);

        let candidates = sub.ambiguous_nodes();
        if candidates.is_empty() {
            // No ReLU left to split: the relaxation is exact here, so the
            // concrete witness settles the region.
            if sub.upper_bound < -tol {
                let cx = sub.best_input.clone();
                return Ok(finish(
                    VerifyStatus::Falsified,
                    Some(cx),
                    branch_count,
                    visited,
                    gnn_decided,
                    total_decided,
                ));
            }
            continue;
        }

        let ctx = BranchContext {
            net,
            domain,
            subdomain: &sub,
            candidates: &candidates,
        };
        let choice = strategy.choose(&ctx)?;
        if !candidates.contains(&choice.decision) {
            return Err(BabError::BadBranch {
                layer: choice.decision.layer,
                unit: choice.decision.unit,
            });
        }
        total_decided += 1;
        if choice.used_gnn {
            gnn_decided += 1;
        }
        let children = match choice.children {
            Some(c) => c,
            None => split_relu(net, domain, &sub, choice.decision)?,
        };
        branch_count += 1;
        for child in children {
            if child.is_infeasible() || child.lower_bound >= -tol {
                continue;
            }
            if child.upper_bound < -tol {
                let cx = child.best_input.clone();
                return Ok(finish(
                    VerifyStatus::Falsified,
                    Some(cx),
                    branch_count,
                    visited,
                    gnn_decided,
                    total_decided,
                ));
            }
            queue.push(QueueEntry {
                lb: child.lower_bound,
                seq,
                sub: Box::new(child),
            });
            seq += 1;
        }
    }
    Ok(finish(
        VerifyStatus::Verified,
        None,
        branch_count,
        visited,
        gnn_decided,
        total_decided,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;
    use ndarray::array;

    struct FirstCandidate;
    impl BranchingStrategy for FirstCandidate {
        fn choose(&mut self, ctx: &BranchContext<'_>) -> Result<StrategyChoice, BabError> {
            Ok(StrategyChoice {
                decision: ctx.candidates[0],
                used_gnn: false,
                children: None,
            })
        }
    }

    fn two_relu_net(out_bias: f64) -> Network {
        Network::new(vec![
            Layer::Dense {
                weight: array![[1.0, 1.0], [1.0, -1.0]],
                bias: array![0.0, 0.0],
            },
            Layer::Dense {
                weight: array![[1.0, 1.0]],
                bias: array![out_bias],
            },
        ])
        .unwrap()
    }

    fn unit_box() -> InputBox {
        InputBox {
            lower: array![-1.0, -1.0],
            upper: array![1.0, 1.0],
        }
    }

    #[test]
    fn nonnegative_sum_of_relus_is_verified() {
        // relu(a) + relu(b) >= 0 everywhere.
        let net = two_relu_net(0.0);
        let out = verify(
            &net,
            &unit_box(),
            &mut FirstCandidate,
            &BabConfig::default(),
        )
        .unwrap();
        assert_eq!(out.status, VerifyStatus::Verified);
    }

    #[test]
    fn negative_offset_is_falsified_with_witness() {
        let net = two_relu_net(-0.5);
        let out = verify(
            &net,
            &unit_box(),
            &mut FirstCandidate,
            &BabConfig::default(),
        )
        .unwrap();
        assert_eq!(out.status, VerifyStatus::Falsified);
        let cx = out.counterexample.unwrap();
        assert!(net.eval_scalar(cx.view()).unwrap() < -1e-6);
        assert!(unit_box().contains(cx.view(), 1e-9));
    }

    #[test]
    fn branch_budget_reports_timeout() {
        // relu(x) - 0.5 relu(2x) + 0.01 is 0.01 everywhere, but the triangle
        // relaxation at the root is loose, so the search must branch.
        let net = Network::new(vec![
            Layer::Dense {
                weight: array![[1.0], [2.0]],
                bias: array![0.0, 0.0],
            },
            Layer::Dense {
                weight: array![[1.0, -0.5]],
                bias: array![0.01],
            },
        ])
        .unwrap();
        let domain = InputBox {
            lower: array![-1.0],
            upper: array![1.0],
        };
        let root =
            evaluate_subdomain(&net, &domain, ReluDecisionMap::undecided(&net), None, 0).unwrap();
        assert!(root.lower_bound < -1e-6, "root must be ambiguous");
        assert!(root.upper_bound >= 0.0);
        let cfg = BabConfig {
            max_branches: Some(0),
            ..BabConfig::default()
        };
        let out = verify(&net, &domain, &mut FirstCandidate, &cfg).unwrap();
        assert_eq!(out.status, VerifyStatus::Timeout);
        assert_eq!(out.branch_count, 0);
    }

    #[test]
    fn improvement_matches_hand_values() {
        assert_eq!(improvement(-4.0, -4.0, -4.0), 0.0);
        assert_eq!(improvement(-4.0, 0.0, 3.0), 1.0);
        assert!((improvement(-4.0, -2.0, -1.0) - 0.625).abs() < 1e-12);
        assert_eq!(improvement(-2.0, f64::INFINITY, -2.0), 0.5);
        assert_eq!(improvement(-1.0, -3.0, -1.0), 0.0);
        assert_eq!(improvement(0.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn children_never_loosen_the_parent_bound() {
        let net = two_relu_net(-0.25);
        let domain = unit_box();
        let root =
            evaluate_subdomain(&net, &domain, ReluDecisionMap::undecided(&net), None, 0).unwrap();
        let picks = root.ambiguous_nodes();
        assert!(!picks.is_empty());
        for pick in picks {
            let children = split_relu(&net, &domain, &root, pick).unwrap();
            for child in &children {
                assert!(child.lower_bound >= root.lower_bound - 1e-9);
            }
        }
    }
}
