//! Branching strategies: random, the intercept-score heuristic, exhaustive
//! strong branching, and the learned scorer with its fail-safe wrapper.

use crate::bab::{
    improvement, split_relu, BabError, BranchContext, BranchDecision, BranchingStrategy,
    StrategyChoice, Subdomain,
};
use crate::bounds::output_intercept_coefficients;
use crate::gnn::{extract_features, infer, FeatureNorm, Gnn, GnnGraph};
use crate::learn::{online_update, FailedDecisionRecord, OnlineConfig};
use crate::network::{InputBox, Network};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::BTreeSet;

/// First index of the maximum score; candidates are sorted by
/// (layer, unit), so ties resolve to the lowest-indexed node.
fn argmax_decision(candidates: &[BranchDecision], scores: &[f64]) -> BranchDecision {
    debug_assert_eq!(candidates.len(), scores.len());
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    candidates[best]
}

/// Uniform choice over the ambiguous nodes.
pub struct RandomStrategy {
    rng: ChaCha8Rng,
}

impl RandomStrategy {
    pub fn new(seed: u64) -> Self {
        RandomStrategy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl BranchingStrategy for RandomStrategy {
    fn choose(&mut self, ctx: &BranchContext<'_>) -> Result<StrategyChoice, BabError> {
        let idx = self.rng.gen_range(0..ctx.candidates.len());
        Ok(StrategyChoice {
            decision: ctx.candidates[idx],
            used_gnn: false,
            children: None,
        })
    }
}

/// Intercept scores, aligned with `sub.ambiguous_nodes()`: each candidate's
/// relaxation intercept weighted by the magnitude of the coefficient that
/// intercept carries into the relaxed output lower bound. A large score
/// marks a node whose relaxation damages the bound most.
pub fn sr_scores(net: &Network, sub: &Subdomain) -> Result<Vec<f64>, BabError> {
    let coeffs = output_intercept_coefficients(net, &sub.bounds, &sub.decisions)?;
    sub.ambiguous_nodes()
        .iter()
        .map(|d| {
            let relax = sub.bounds.relaxation(d.layer, d.unit)?;
            Ok(relax.beta * coeffs[d.layer][d.unit].abs())
        })
        .collect()
}

/// Argmax of [`sr_scores`], ties broken by (layer, unit) order.
pub fn sr_choice(net: &Network, sub: &Subdomain) -> Result<BranchDecision, BabError> {
    let candidates = sub.ambiguous_nodes();
    let scores = sr_scores(net, sub)?;
    Ok(argmax_decision(&candidates, &scores))
}

pub struct SrStrategy;

impl BranchingStrategy for SrStrategy {
    fn choose(&mut self, ctx: &BranchContext<'_>) -> Result<StrategyChoice, BabError> {
        Ok(StrategyChoice {
            decision: sr_choice(ctx.net, ctx.subdomain)?,
            used_gnn: false,
            children: None,
        })
    }
}

/// JSON has no literal for infinite floats (serde_json writes them as
/// null), but an infeasible child's bound is +inf and must survive a
/// dataset round-trip; non-finite values are stored as "inf"/"-inf".
mod bound_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Word(w) => match w.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(D::Error::custom(format!("bad bound value {other:?}"))),
            },
        }
    }
}

/// One evaluated candidate split: both child bounds and the relative
/// improvement they buy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrongBranchLabel {
    pub decision: BranchDecision,
    pub m: f64,
    #[serde(with = "bound_serde")]
    pub lb1: f64,
    #[serde(with = "bound_serde")]
    pub lb2: f64,
}

pub struct StrongBranchOutcome {
    /// All evaluated candidates, best improvement first (ties by node order).
    pub labels: Vec<StrongBranchLabel>,
    pub best: BranchDecision,
    pub best_children: [Subdomain; 2],
}

/// Splits on every candidate, solving both child relaxations, and ranks the
/// candidates by relative improvement. The best candidate's children are
/// returned so the caller can reuse the LP work.
pub fn strong_branch(
    net: &Network,
    domain: &InputBox,
    sub: &Subdomain,
    candidates: &[BranchDecision],
) -> Result<StrongBranchOutcome, BabError> {
    assert!(!candidates.is_empty(), "strong branching needs candidates");
    let mut labels = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, BranchDecision, [Subdomain; 2])> = None;
    for &decision in candidates {
        let children = split_relu(net, domain, sub, decision)?;
        let m = improvement(
            sub.lower_bound,
            children[0].lower_bound,
            children[1].lower_bound,
        );
        labels.push(StrongBranchLabel {
            decision,
            m,
            lb1: children[0].lower_bound,
            lb2: children[1].lower_bound,
        });
        if best.as_ref().map_or(true, |(bm, _, _)| m > *bm) {
            best = Some((m, decision, children));
        }
    }
    let (_, best_decision, best_children) = best.expect("nonempty candidates");
    labels.sort_by(|a, b| {
        b.m.partial_cmp(&a.m)
            .expect("improvements are finite")
            .then_with(|| a.decision.cmp(&b.decision))
    });
    Ok(StrongBranchOutcome {
        labels,
        best: best_decision,
        best_children,
    })
}

/// Exhaustive strong branching over every ambiguous node.
pub struct StrongStrategy;

impl BranchingStrategy for StrongStrategy {
    fn choose(&mut self, ctx: &BranchContext<'_>) -> Result<StrategyChoice, BabError> {
        let outcome = strong_branch(ctx.net, ctx.domain, ctx.subdomain, ctx.candidates)?;
        Ok(StrategyChoice {
            decision: outcome.best,
            used_gnn: false,
            children: Some(outcome.best_children),
        })
    }
}

/// Union of the top-k candidates by score and a per-layer uniform sample
/// covering at least `ceil(coverage * ambiguous-in-layer)` nodes, dedup'd
/// and sorted by (layer, unit).
pub fn candidate_subset(
    candidates: &[BranchDecision],
    scores: &[f64],
    top_k: usize,
    coverage: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<BranchDecision> {
    assert_eq!(candidates.len(), scores.len());
    assert!(coverage > 0.0 && coverage <= 1.0);
    let mut picked = BTreeSet::new();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then_with(|| candidates[a].cmp(&candidates[b]))
    });
    for &i in order.iter().take(top_k) {
        picked.insert(candidates[i]);
    }
    let mut by_layer: BTreeMap<usize, Vec<BranchDecision>> = BTreeMap::new();
    for &c in candidates {
        by_layer.entry(c.layer).or_default().push(c);
    }
    for layer_cands in by_layer.values() {
        let want = (coverage * layer_cands.len() as f64).ceil() as usize;
        let take = want.min(layer_cands.len());
        for idx in rand::seq::index::sample(rng, layer_cands.len(), take) {
            picked.insert(layer_cands[idx]);
        }
    }
    picked.into_iter().collect()
}

/// A loaded scorer plus the feature normalization it was trained with.
#[derive(Clone)]
pub struct GnnPolicy {
    pub gnn: Gnn,
    pub norm: FeatureNorm,
}

impl GnnPolicy {
    /// Scores every ambiguous node, returning the graph for reuse.
    pub fn rank(
        &self,
        net: &Network,
        domain: &InputBox,
        sub: &Subdomain,
    ) -> Result<(Vec<BranchDecision>, Vec<f64>, GnnGraph), BabError> {
        let raw = extract_features(net, domain, sub)?;
        let graph = GnnGraph::new(net, &raw, &self.norm)?;
        let candidates = sub.ambiguous_nodes();
        let scores = infer(&self.gnn, net, &graph, &candidates);
        Ok((candidates, scores, graph))
    }
}

/// Highest learned score, ties broken by (layer, unit) order.
pub fn gnn_choice(
    policy: &GnnPolicy,
    net: &Network,
    domain: &InputBox,
    sub: &Subdomain,
) -> Result<BranchDecision, BabError> {
    let (candidates, scores, _) = policy.rank(net, domain, sub)?;
    Ok(argmax_decision(&candidates, &scores))
}

/// The learned scorer guarded by the intercept heuristic: when the scorer's
/// split improves the bound by less than `threshold`, the heuristic's split
/// is also measured and the better one is kept. Failures (heuristic strictly
/// better) are recorded; with online updates enabled, a failure pair seen
/// twice triggers one fine-tuning step on the run-local parameter copy.
pub struct GnnFailsafeStrategy {
    pub policy: GnnPolicy,
    pub threshold: f64,
    pub online: Option<OnlineConfig>,
    records: BTreeMap<(BranchDecision, BranchDecision), FailedDecisionRecord>,
    online_updates: u64,
}

impl GnnFailsafeStrategy {
    pub fn new(policy: GnnPolicy, threshold: f64, online: Option<OnlineConfig>) -> Self {
        assert!(threshold > 0.0 && threshold < 1.0);
        GnnFailsafeStrategy {
            policy,
            threshold,
            online,
            records: BTreeMap::new(),
            online_updates: 0,
        }
    }

    pub fn failure_records(&self) -> impl Iterator<Item = &FailedDecisionRecord> {
        self.records.values()
    }

    pub fn online_updates(&self) -> u64 {
        self.online_updates
    }
}

impl BranchingStrategy for GnnFailsafeStrategy {
    fn choose(&mut self, ctx: &BranchContext<'_>) -> Result<StrategyChoice, BabError> {
        let (candidates, scores, graph) = self.policy.rank(ctx.net, ctx.domain, ctx.subdomain)?;
        let gnn_decision = argmax_decision(&candidates, &scores);
        let gnn_children = split_relu(ctx.net, ctx.domain, ctx.subdomain, gnn_decision)?;
        let m_gnn = improvement(
            ctx.subdomain.lower_bound,
            gnn_children[0].lower_bound,
            gnn_children[1].lower_bound,
        );
        if m_gnn >= self.threshold {
            return Ok(StrategyChoice {
                decision: gnn_decision,
                used_gnn: true,
                children: Some(gnn_children),
            });
        }
        let heur_decision = sr_choice(ctx.net, ctx.subdomain)?;
        if heur_decision == gnn_decision {
            return Ok(StrategyChoice {
                decision: gnn_decision,
                used_gnn: true,
                children: Some(gnn_children),
            });
        }
        let heur_children = split_relu(ctx.net, ctx.domain, ctx.subdomain, heur_decision)?;
        let m_heur = improvement(
            ctx.subdomain.lower_bound,
            heur_children[0].lower_bound,
            heur_children[1].lower_bound,
        );
        if m_heur <= m_gnn {
            return Ok(StrategyChoice {
                decision: gnn_decision,
                used_gnn: true,
                children: Some(gnn_children),
            });
        }
        let record = self
            .records
            .entry((gnn_decision, heur_decision))
            .and_modify(|r| {
                r.occurrences += 1;
                r.fingerprint = ctx.subdomain.decisions.fingerprint();
                r.m_gnn = m_gnn;
                r.m_heuristic = m_heur;
            })
            .or_insert(FailedDecisionRecord {
                fingerprint: ctx.subdomain.decisions.fingerprint(),
                gnn_choice: gnn_decision,
                heuristic_choice: heur_decision,
                m_gnn,
                m_heuristic: m_heur,
                occurrences: 1,
            })
            .clone();
        if let Some(cfg) = &self.online {
            if online_update(&mut self.policy.gnn, ctx.net, &graph, &record, cfg).is_some() {
                self.online_updates += 1;
            }
        }
        Ok(StrategyChoice {
            decision: heur_decision,
            used_gnn: false,
            children: Some(heur_children),
        })
    }
}
