//! Bounded-variable linear programs and the relaxation LP of a subdomain.
//!
//! The solver reports primal values, row duals and reduced costs. Duals
//! follow the convention `reduced_cost = objective + A^T * dual`, so for a
//! minimisation the dual of a binding `<=` row is nonnegative, the dual of a
//! binding `>=` row is nonpositive, and equality rows are unrestricted.

mod simplex;

use crate::bounds::{alpha_beta, BoundsError, DecisionState, LayerBounds, ReluDecisionMap};
use crate::network::{InputBox, Network};
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("malformed problem: {0}")]
    BadProblem(String),
    #[error("numerical instability: {0}")]
    Numerical(String),
    #[error("decision at layer {layer}, unit {unit} contradicts its bounds")]
    InfeasibleByConstruction { layer: usize, unit: usize },
}

/// Row sense of a linear constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rel {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
pub struct LpRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rel: Rel,
    pub rhs: f64,
}

/// `min c^T x` subject to linear rows and box bounds on the variables.
/// Bounds default to free; infinities are allowed.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub rows: Vec<LpRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LpProblem {
    pub fn new(num_vars: usize) -> Self {
        LpProblem {
            objective: vec![0.0; num_vars],
            rows: Vec::new(),
            lower: vec![f64::NEG_INFINITY; num_vars],
            upper: vec![f64::INFINITY; num_vars],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn set_bounds(&mut self, var: usize, lo: f64, hi: f64) {
        self.lower[var] = lo;
        self.upper[var] = hi;
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, rel: Rel, rhs: f64) -> usize {
        self.rows.push(LpRow { coeffs, rel, rhs });
        self.rows.len() - 1
    }

    fn validate(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        for (j, (&lo, &hi)) in self.lower.iter().zip(self.upper.iter()).enumerate() {
            if lo.is_nan() || hi.is_nan() {
                return Err(LpError::BadProblem(format!("NaN bound on variable {j}")));
            }
            if lo > hi {
                return Err(LpError::BadProblem(format!(
                    "variable {j} has lower bound {lo} above upper bound {hi}"
                )));
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(LpError::BadProblem(format!("row {r} has non-finite rhs")));
            }
            for &(j, v) in &row.coeffs {
                if j >= n {
                    return Err(LpError::BadProblem(format!(
                        "row {r} references variable {j} out of {n}"
                    )));
                }
                if !v.is_finite() {
                    return Err(LpError::BadProblem(format!(
                        "row {r} has non-finite coefficient on variable {j}"
                    )));
                }
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::BadProblem("non-finite objective".into()));
        }
        Ok(())
    }

    /// Plain-text dump in LP-file style, for debugging.
    pub fn dump_lp_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::from("Minimize\n obj:");
        for (j, &c) in self.objective.iter().enumerate() {
            if c != 0.0 {
                let _ = write!(s, " {} {} x{}", if c < 0.0 { "-" } else { "+" }, c.abs(), j);
            }
        }
        s.push_str("\nSubject To\n");
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(s, " r{r}:");
            for &(j, v) in &row.coeffs {
                let _ = write!(s, " {} {} x{}", if v < 0.0 { "-" } else { "+" }, v.abs(), j);
            }
            let rel = match row.rel {
                Rel::Le => "<=",
                Rel::Eq => "=",
                Rel::Ge => ">=",
            };
            let _ = writeln!(s, " {rel} {}", row.rhs);
        }
        s.push_str("Bounds\n");
        for j in 0..self.num_vars() {
            let _ = writeln!(s, " {} <= x{j} <= {}", self.lower[j], self.upper[j]);
        }
        s.push_str("End\n");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub objective: f64,
    pub primal: Vec<f64>,
    /// One multiplier per row; see the module docs for the sign convention.
    pub dual: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    pub iterations: usize,
}

/// Solves the problem with the dense revised simplex.
pub fn solve(p: &LpProblem) -> Result<LpSolution, LpError> {
    simplex::Solver::new(p)?.run(p)
}

/// Verifies the KKT conditions of an optimal solution: primal feasibility,
/// dual sign conventions, stationarity and complementary slackness. Returns
/// the largest complementary-slackness product on success.
pub fn check_kkt(p: &LpProblem, sol: &LpSolution, tol: f64) -> Result<f64, String> {
    if sol.status != LpStatus::Optimal {
        return Err("solution is not optimal".into());
    }
    let x = &sol.primal;
    for (j, &v) in x.iter().enumerate() {
        if v < p.lower[j] - tol || v > p.upper[j] + tol {
            return Err(format!("variable {j} out of bounds: {v}"));
        }
    }
    let mut max_cs = 0.0f64;
    for (r, row) in p.rows.iter().enumerate() {
        let activity: f64 = row.coeffs.iter().map(|&(j, v)| v * x[j]).sum();
        let slack = row.rhs - activity;
        let scale = 1.0 + activity.abs() + row.rhs.abs();
        match row.rel {
            Rel::Le if slack < -tol * scale => {
                return Err(format!("row {r} violated by {}", -slack));
            }
            Rel::Ge if slack > tol * scale => {
                return Err(format!("row {r} violated by {slack}"));
            }
            Rel::Eq if slack.abs() > tol * scale => {
                return Err(format!("row {r} violated by {}", slack.abs()));
            }
            _ => {}
        }
        let dual = sol.dual[r];
        match row.rel {
            Rel::Le if dual < -tol => return Err(format!("row {r} has negative <= dual {dual}")),
            Rel::Ge if dual > tol => return Err(format!("row {r} has positive >= dual {dual}")),
            _ => {}
        }
        max_cs = max_cs.max((dual * slack).abs());
    }
    // Stationarity: reduced cost = objective + A^T dual, with the sign of
    // the reduced cost matching which bound the variable rests on.
    for j in 0..p.num_vars() {
        let mut d = p.objective[j];
        for (r, row) in p.rows.iter().enumerate() {
            for &(jj, v) in &row.coeffs {
                if jj == j {
                    d += sol.dual[r] * v;
                }
            }
        }
        let span = 1.0 + d.abs();
        if (d - sol.reduced_costs[j]).abs() > tol * span {
            return Err(format!(
                "reduced cost mismatch on variable {j}: {d} vs {}",
                sol.reduced_costs[j]
            ));
        }
        let at_lower = x[j] <= p.lower[j] + tol;
        let at_upper = x[j] >= p.upper[j] - tol;
        if !at_lower && !at_upper && d.abs() > 1e-6 * span {
            return Err(format!("interior variable {j} has reduced cost {d}"));
        }
        if at_lower && !at_upper && d < -1e-6 * span {
            return Err(format!("variable {j} at lower bound has reduced cost {d}"));
        }
        if at_upper && !at_lower && d > 1e-6 * span {
            return Err(format!("variable {j} at upper bound has reduced cost {d}"));
        }
    }
    Ok(max_cs)
}

/// Column layout of a subdomain LP: inputs, then per hidden layer its
/// pre- and post-activation blocks, then the scalar output.
#[derive(Debug, Clone)]
pub struct VarMap {
    pub input: std::ops::Range<usize>,
    pub pre: Vec<std::ops::Range<usize>>,
    pub post: Vec<std::ops::Range<usize>>,
    pub output: usize,
    pub total: usize,
}

/// A subdomain LP plus the bookkeeping needed to read the solution back
/// onto the network graph.
#[derive(Debug)]
pub struct PlanetLp {
    pub problem: LpProblem,
    pub vars: VarMap,
    /// Per hidden layer and unit, the index of the first of the three
    /// relaxation rows, populated for ambiguous nodes only.
    pub relu_rows: Vec<Vec<Option<usize>>>,
}

/// Builds the triangle-relaxation LP of a subdomain. Every affine layer
/// contributes equality rows; each ambiguous ReLU contributes the three rows
/// `-x <= 0`, `x_hat - x <= 0` and `x - alpha * x_hat <= beta`; decided and
/// stable nodes are fixed or passed through. Pre-activation variables carry
/// the subdomain's bounds. The objective minimises the output.
pub fn build_planet_lp(
    net: &Network,
    domain: &InputBox,
    bounds: &LayerBounds,
    decisions: &ReluDecisionMap,
) -> Result<PlanetLp, LpError> {
    let depth = net.depth();
    let n0 = net.input_size();
    let mut pre = Vec::with_capacity(depth - 1);
    let mut post = Vec::with_capacity(depth - 1);
    let mut next = n0;
    for h in 0..depth - 1 {
        let w = net.layer_out_size(h);
        pre.push(next..next + w);
        post.push(next + w..next + 2 * w);
        next += 2 * w;
    }
    let vars = VarMap {
        input: 0..n0,
        pre,
        post,
        output: next,
        total: next + 1,
    };

    let mut p = LpProblem::new(vars.total);
    p.objective[vars.output] = 1.0;
    for j in 0..n0 {
        p.set_bounds(j, domain.lower[j], domain.upper[j]);
    }
    for h in 0..depth - 1 {
        for u in 0..net.layer_out_size(h) {
            p.set_bounds(vars.pre[h].start + u, bounds.lower[h][u], bounds.upper[h][u]);
        }
    }
    let out_layer = depth - 1;
    p.set_bounds(
        vars.output,
        bounds.lower[out_layer][0],
        bounds.upper[out_layer][0],
    );

    // Affine equalities: pre_{h} - W * in_{h} = bias.
    for (h, layer) in net.layers().iter().enumerate() {
        let in_start = if h == 0 {
            vars.input.start
        } else {
            vars.post[h - 1].start
        };
        let bias = layer.bias_flat();
        for u in 0..layer.out_size() {
            let out_var = if h == out_layer {
                vars.output
            } else {
                vars.pre[h].start + u
            };
            let mut coeffs = vec![(out_var, 1.0)];
            for (j, w) in layer.row_coeffs(u) {
                coeffs.push((in_start + j, -w));
            }
            p.add_row(coeffs, Rel::Eq, bias[u]);
        }
    }

    // ReLU constraints.
    let mut relu_rows = Vec::with_capacity(depth - 1);
    for h in 0..depth - 1 {
        let mut layer_rows = vec![None; net.layer_out_size(h)];
        for u in 0..net.layer_out_size(h) {
            let (l, up) = (bounds.lower[h][u], bounds.upper[h][u]);
            let pre_var = vars.pre[h].start + u;
            let post_var = vars.post[h].start + u;
            let state = decisions.get(h, u);
            if state == DecisionState::Passing && up < 0.0 {
                return Err(LpError::InfeasibleByConstruction { layer: h, unit: u });
            }
            if state == DecisionState::Blocked && l > 0.0 {
                return Err(LpError::InfeasibleByConstruction { layer: h, unit: u });
            }
            let relax = alpha_beta(l, up).map_err(|e| match e {
                BoundsError::InfeasibleSplit { layer, unit } => {
                    LpError::InfeasibleByConstruction { layer, unit }
                }
                other => LpError::BadProblem(other.to_string()),
            })?;
            let blocked = state == DecisionState::Blocked || up <= 0.0;
            let passing = !blocked && (state == DecisionState::Passing || l >= 0.0);
            if blocked {
                p.set_bounds(post_var, 0.0, 0.0);
                p.set_bounds(pre_var, l, up.min(0.0));
            } else if passing {
                p.add_row(vec![(post_var, 1.0), (pre_var, -1.0)], Rel::Eq, 0.0);
                p.set_bounds(pre_var, l.max(0.0), up);
                p.set_bounds(post_var, l.max(0.0), up);
            } else {
                let first = p.add_row(vec![(post_var, -1.0)], Rel::Le, 0.0);
                p.add_row(vec![(pre_var, 1.0), (post_var, -1.0)], Rel::Le, 0.0);
                p.add_row(
                    vec![(post_var, 1.0), (pre_var, -relax.alpha)],
                    Rel::Le,
                    relax.beta,
                );
                layer_rows[u] = Some(first);
            }
        }
        relu_rows.push(layer_rows);
    }

    Ok(PlanetLp {
        problem: p,
        vars,
        relu_rows,
    })
}

/// Optimal relaxation values attached back onto the network graph.
#[derive(Debug, Clone)]
pub struct PlanetSolution {
    pub lower_bound: f64,
    pub input: Array1<f64>,
    pub pre: Vec<Array1<f64>>,
    pub post: Vec<Array1<f64>>,
    pub output: f64,
    /// Per hidden layer, an `(units, 3)` matrix of the duals of the three
    /// relaxation rows; rows of decided or stable nodes stay zero.
    pub relu_duals: Vec<Array2<f64>>,
}

/// Result of bounding a subdomain: either the relaxed output minimum with
/// its primal and dual decorations, or proof that the subdomain is empty.
pub enum PlanetOutcome {
    Feasible(Box<PlanetSolution>),
    InfeasibleSubdomain,
}

/// Solves the subdomain relaxation LP. Infeasibility (either detected by the
/// solver or forced by contradictory decisions) marks the subdomain as
/// prunable rather than being an error.
pub fn output_lower_bound(
    net: &Network,
    domain: &InputBox,
    bounds: &LayerBounds,
    decisions: &ReluDecisionMap,
) -> Result<PlanetOutcome, LpError> {
    let built = match build_planet_lp(net, domain, bounds, decisions) {
        Ok(b) => b,
        Err(LpError::InfeasibleByConstruction { .. }) => {
            return Ok(PlanetOutcome::InfeasibleSubdomain)
        }
        Err(e) => return Err(e),
    };
    let sol = solve(&built.problem)?;
    match sol.status {
        LpStatus::Infeasible => Ok(PlanetOutcome::InfeasibleSubdomain),
        LpStatus::Unbounded => Err(LpError::Numerical(
            "subdomain relaxation reported unbounded".into(),
        )),
        LpStatus::Optimal => {
            let vars = &built.vars;
            let input = Array1::from_iter(sol.primal[vars.input.clone()].iter().copied());
            let mut pre = Vec::with_capacity(vars.pre.len());
            let mut post = Vec::with_capacity(vars.post.len());
            for h in 0..vars.pre.len() {
                pre.push(Array1::from_iter(
                    sol.primal[vars.pre[h].clone()].iter().copied(),
                ));
                post.push(Array1::from_iter(
                    sol.primal[vars.post[h].clone()].iter().copied(),
                ));
            }
            let mut relu_duals = Vec::with_capacity(built.relu_rows.len());
            for layer_rows in &built.relu_rows {
                let mut duals = Array2::zeros((layer_rows.len(), 3));
                for (u, row) in layer_rows.iter().enumerate() {
                    if let Some(first) = row {
                        for k in 0..3 {
                            duals[[u, k]] = sol.dual[first + k];
                        }
                    }
                }
                relu_duals.push(duals);
            }
            Ok(PlanetOutcome::Feasible(Box::new(PlanetSolution {
                lower_bound: sol.objective,
                input,
                pre,
                post,
                output: sol.primal[vars.output],
                relu_duals,
            })))
        }
    }
}
