//! Branch-and-bound verification of piecewise-linear (ReLU) networks with a
//! learned branching policy.
//!
//! The crate is organised around the lifecycle of a verification query:
//!
//! * [`network`] loads feed-forward models (dense and conv2d layers) and
//!   encodes classification robustness queries as a single scalar property
//!   `f(x) >= 0` over a box domain.
//! * [`bounds`] computes interval and linear-relaxation bounds on every
//!   pre-activation, tracking branching decisions on individual ReLUs.
//! * [`lp`] builds the triangle-relaxation linear program of a subdomain and
//!   solves it with a dense revised simplex, returning primal and dual values.
//! * [`bab`] runs the branch-and-bound loop itself: pick the weakest
//!   subdomain, split one ReLU, prune, and stop on a verdict or timeout.
//! * [`branching`] scores split candidates: random, a backward-pass
//!   heuristic, exhaustive strong branching, and a trained graph network
//!   with a fail-safe wrapper.
//! * [`gnn`] embeds a subdomain's computation graph and scores every
//!   ambiguous ReLU; gradients are exact reverse-mode.
//! * [`learn`] generates strong-branching imitation data, trains the graph
//!   network, and applies online updates when the policy underperforms.

pub mod bab;
pub mod bounds;
pub mod branching;
pub mod gnn;
pub mod learn;
pub mod lp;
pub mod network;

pub use bab::{
    evaluate_subdomain, improvement, split_relu, verify, verify_with_observer, BabConfig,
    BabError, BranchContext, BranchDecision, BranchingStrategy, StrategyChoice, Subdomain,
    VerifyOutcome, VerifyStatus,
};
pub use bounds::{
    alpha_beta, interval_bounds, linbound_bounds, DecisionState, LayerBounds, RelaxationParams,
    ReluDecisionMap,
};
pub use branching::{
    candidate_subset, gnn_choice, sr_choice, sr_scores, strong_branch, GnnFailsafeStrategy,
    GnnPolicy, RandomStrategy, SrStrategy, StrongBranchLabel, StrongBranchOutcome, StrongStrategy,
};
pub use gnn::{
    extract_features, hinge_loss_grad, infer, load_checkpoint, save_checkpoint, score_gap_grad,
    Checkpoint, FeatureNorm, Gnn, GnnGraph, Grads, RawFeatures,
};
pub use learn::{
    accuracy, assign_labels, gen_dataset, load_dataset, online_update, prepare_samples,
    save_dataset, train, AdamW, DatasetHeader, DatasetProperty, EpochRow, FailedDecisionRecord,
    GenConfig, GenStats, OnlineConfig, PreparedSample, TrainConfig, TrainOutcome, TrainingSample,
};
pub use lp::{
    build_planet_lp, check_kkt, output_lower_bound, solve, LpProblem, LpRow, LpSolution, LpStatus,
    PlanetOutcome, PlanetSolution, Rel,
};
pub use network::{
    encode_property, load_network, make_box, network_to_json, parse_network, InputBox, Layer,
    Network, NetworkError, VerificationProblem,
};
