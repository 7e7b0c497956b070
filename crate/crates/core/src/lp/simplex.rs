//! Dense revised simplex for bounded-variable linear programs.
//!
//! Two phases: artificial variables absorb the initial row residuals and are
//! driven to zero, then the true objective is minimised. The basis inverse
//! is kept explicitly and refreshed periodically. Pivoting is Dantzig's rule
//! with deterministic tie-breaking; after a stall the solver switches to
//! Bland's rule, which cannot cycle. Identical problems therefore produce
//! identical pivot sequences and solutions.

use super::{LpError, LpProblem, LpSolution, LpStatus, Rel};
use ndarray::Array2;

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;
const STALL_LIMIT: usize = 60;
const REFACTOR_EVERY: usize = 120;

#[derive(Clone, Copy, PartialEq)]
enum Location {
    Basic,
    AtLower,
    AtUpper,
    /// Free variable resting at zero.
    Floating,
}

pub(super) struct Solver {
    n: usize,
    m: usize,
    total: usize,
    cols: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    x: Vec<f64>,
    basis: Vec<usize>,
    location: Vec<Location>,
    binv: Array2<f64>,
    bland: bool,
    stall: usize,
    last_objective: f64,
    pivots_since_refactor: usize,
    iterations: usize,
}

impl Solver {
    pub(super) fn new(p: &LpProblem) -> Result<Self, LpError> {
        p.validate()?;
        let n = p.num_vars();
        let m = p.rows.len();
        let total = n + 2 * m;
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); total];
        for (r, row) in p.rows.iter().enumerate() {
            for &(j, v) in &row.coeffs {
                if v != 0.0 {
                    cols[j].push((r, v));
                }
            }
            cols[n + r].push((r, 1.0));
            cols[n + m + r].push((r, 1.0));
        }
        let mut lo = p.lower.clone();
        let mut hi = p.upper.clone();
        for row in &p.rows {
            let (sl, sh) = match row.rel {
                Rel::Le => (0.0, f64::INFINITY),
                Rel::Ge => (f64::NEG_INFINITY, 0.0),
                Rel::Eq => (0.0, 0.0),
            };
            lo.push(sl);
            hi.push(sh);
        }
        lo.extend(std::iter::repeat(0.0).take(m));
        hi.extend(std::iter::repeat(0.0).take(m));

        let mut x = vec![0.0; total];
        let mut location = vec![Location::Floating; total];
        for j in 0..n + m {
            if lo[j].is_finite() {
                x[j] = lo[j];
                location[j] = Location::AtLower;
            } else if hi[j].is_finite() {
                x[j] = hi[j];
                location[j] = Location::AtUpper;
            } else {
                x[j] = 0.0;
                location[j] = Location::Floating;
            }
        }
        let mut solver = Solver {
            n,
            m,
            total,
            cols,
            rhs: p.rows.iter().map(|r| r.rhs).collect(),
            lo,
            hi,
            cost: vec![0.0; total],
            x,
            basis: (0..m).map(|r| n + m + r).collect(),
            location,
            binv: Array2::eye(m),
            bland: false,
            stall: 0,
            last_objective: f64::INFINITY,
            pivots_since_refactor: 0,
            iterations: 0,
        };
        for r in 0..m {
            let art = solver.n + solver.m + r;
            let mut activity = 0.0;
            for &(j, v) in &p.rows[r].coeffs {
                activity += v * solver.x[j];
            }
            activity += solver.x[solver.n + r];
            let residual = p.rows[r].rhs - activity;
            solver.x[art] = residual;
            solver.location[art] = Location::Basic;
            if residual >= 0.0 {
                solver.hi[art] = f64::INFINITY;
                solver.cost[art] = 1.0;
            } else {
                solver.lo[art] = f64::NEG_INFINITY;
                solver.cost[art] = -1.0;
            }
        }
        Ok(solver)
    }

    pub(super) fn run(mut self, p: &LpProblem) -> Result<LpSolution, LpError> {
        let phase1_obj = self.optimize()?;
        if !phase1_obj.is_finite() {
            return Err(LpError::Numerical(
                "phase 1 reported an unbounded ray".into(),
            ));
        }
        if phase1_obj > FEAS_TOL {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                objective: f64::INFINITY,
                primal: Vec::new(),
                dual: Vec::new(),
                reduced_costs: Vec::new(),
                iterations: self.iterations,
            });
        }
        for r in 0..self.m {
            let art = self.n + self.m + r;
            self.lo[art] = 0.0;
            self.hi[art] = 0.0;
            self.cost[art] = 0.0;
            if self.location[art] != Location::Basic {
                self.x[art] = 0.0;
                self.location[art] = Location::AtLower;
            }
        }
        self.cost[..self.n].copy_from_slice(&p.objective);
        for j in self.n..self.n + self.m {
            self.cost[j] = 0.0;
        }
        self.bland = false;
        self.stall = 0;
        self.last_objective = f64::INFINITY;
        let objective = self.optimize()?;
        if !objective.is_finite() {
            return Ok(LpSolution {
                status: LpStatus::Unbounded,
                objective: f64::NEG_INFINITY,
                primal: Vec::new(),
                dual: Vec::new(),
                reduced_costs: Vec::new(),
                iterations: self.iterations,
            });
        }

        let y = self.multipliers();
        let dual: Vec<f64> = y.iter().map(|v| -v).collect();
        let reduced_costs: Vec<f64> = (0..self.n).map(|j| self.reduced_cost(j, &y)).collect();
        let mut primal = Vec::with_capacity(self.n);
        for j in 0..self.n {
            let mut v = self.x[j];
            if self.lo[j].is_finite() {
                v = v.max(self.lo[j]);
            }
            if self.hi[j].is_finite() {
                v = v.min(self.hi[j]);
            }
            primal.push(v);
        }
        let objective = primal
            .iter()
            .zip(p.objective.iter())
            .map(|(x, c)| x * c)
            .sum();
        Ok(LpSolution {
            status: LpStatus::Optimal,
            objective,
            primal,
            dual,
            reduced_costs,
            iterations: self.iterations,
        })
    }

    fn multipliers(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.m];
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = self.cost[b];
            if cb != 0.0 {
                for r in 0..self.m {
                    y[r] += cb * self.binv[[i, r]];
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64]) -> f64 {
        let mut d = self.cost[j];
        for &(r, v) in &self.cols[j] {
            d -= y[r] * v;
        }
        d
    }

    fn objective_value(&self) -> f64 {
        (0..self.total).map(|j| self.cost[j] * self.x[j]).sum()
    }

    /// Runs primal simplex iterations until optimality of the current cost
    /// vector; returns the final objective. `f64::NEG_INFINITY` signals an
    /// unbounded ray.
    fn optimize(&mut self) -> Result<f64, LpError> {
        if self.m == 0 {
            return Ok(self.optimize_unconstrained());
        }
        let iteration_cap = 20_000 + 200 * self.total;
        loop {
            self.iterations += 1;
            if self.iterations > iteration_cap {
                return Err(LpError::Numerical(format!(
                    "iteration cap {iteration_cap} exceeded"
                )));
            }
            if self.pivots_since_refactor >= REFACTOR_EVERY {
                self.refactorize()?;
            }
            let obj = self.objective_value();
            if obj < self.last_objective - 1e-12 {
                self.stall = 0;
            } else {
                self.stall += 1;
                if self.stall > STALL_LIMIT {
                    self.bland = true;
                }
            }
            self.last_objective = obj;

            let y = self.multipliers();
            let Some((e, direction)) = self.pick_entering(&y) else {
                return Ok(obj);
            };
            match self.step(e, direction)? {
                StepOutcome::Moved => {}
                StepOutcome::Unbounded => {
                    // A spurious ray can follow from a drifted inverse; retry
                    // once against a refactorised basis.
                    if self.pivots_since_refactor > 0 {
                        self.refactorize()?;
                        if let StepOutcome::Unbounded = self.step(e, direction)? {
                            return Ok(f64::NEG_INFINITY);
                        }
                    } else {
                        return Ok(f64::NEG_INFINITY);
                    }
                }
            }
        }
    }

    fn optimize_unconstrained(&mut self) -> f64 {
        for j in 0..self.n {
            let c = self.cost[j];
            if c > 0.0 {
                if self.lo[j].is_finite() {
                    self.x[j] = self.lo[j];
                } else {
                    return f64::NEG_INFINITY;
                }
            } else if c < 0.0 {
                if self.hi[j].is_finite() {
                    self.x[j] = self.hi[j];
                } else {
                    return f64::NEG_INFINITY;
                }
            }
        }
        self.objective_value()
    }

    /// Entering variable and its movement direction (+1 increases the
    /// variable). Dantzig by default, Bland after a stall.
    fn pick_entering(&self, y: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..self.total {
            let (can_up, can_down) = match self.location[j] {
                Location::Basic => continue,
                Location::AtLower => (true, false),
                Location::AtUpper => (false, true),
                Location::Floating => (true, true),
            };
            if self.lo[j] == self.hi[j] {
                continue;
            }
            let d = self.reduced_cost(j, y);
            let (viol, dir) = if can_up && d < -PIVOT_TOL {
                (-d, 1.0)
            } else if can_down && d > PIVOT_TOL {
                (d, -1.0)
            } else {
                continue;
            };
            if self.bland {
                return Some((j, dir));
            }
            match best {
                Some((_, _, v)) if v >= viol => {}
                _ => best = Some((j, dir, viol)),
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    /// Moves the entering variable as far as the basic variables and its own
    /// opposite bound allow, then pivots or flips bounds.
    fn step(&mut self, e: usize, direction: f64) -> Result<StepOutcome, LpError> {
        let mut w = vec![0.0; self.m];
        for &(r, v) in &self.cols[e] {
            for i in 0..self.m {
                w[i] += self.binv[[i, r]] * v;
            }
        }

        // Max step before the entering variable hits its opposite bound.
        let own_limit = if direction > 0.0 {
            self.hi[e] - self.x[e]
        } else {
            self.x[e] - self.lo[e]
        };
        let mut t = own_limit;
        let mut leaving: Option<(usize, f64)> = None; // (basis position, bound hit)
        for i in 0..self.m {
            let delta = -direction * w[i];
            let b = self.basis[i];
            let limit = if delta > PIVOT_TOL {
                if self.hi[b].is_infinite() {
                    continue;
                }
                (self.hi[b] - self.x[b]) / delta
            } else if delta < -PIVOT_TOL {
                if self.lo[b].is_infinite() {
                    continue;
                }
                (self.lo[b] - self.x[b]) / delta
            } else {
                continue;
            };
            let limit = limit.max(0.0);
            let better = match leaving {
                None => limit < t - 1e-12 || (limit.is_finite() && t.is_infinite()),
                Some((cur, _)) => {
                    limit < t - 1e-12
                        || (limit < t + 1e-12
                            && if self.bland {
                                self.basis[i] < self.basis[cur]
                            } else {
                                w[i].abs() > w[cur].abs()
                            })
                }
            };
            if better {
                t = limit.min(t);
                let bound = if delta > 0.0 { self.hi[b] } else { self.lo[b] };
                leaving = Some((i, bound));
            }
        }

        if t.is_infinite() {
            return Ok(StepOutcome::Unbounded);
        }
        let t = t.max(0.0);

        // Apply the move.
        self.x[e] += direction * t;
        for i in 0..self.m {
            let b = self.basis[i];
            self.x[b] -= direction * t * w[i];
        }

        match leaving {
            None => {
                // Bound flip: entering travelled to its opposite bound.
                self.location[e] = if direction > 0.0 {
                    Location::AtUpper
                } else {
                    Location::AtLower
                };
                self.x[e] = if direction > 0.0 {
                    self.hi[e]
                } else {
                    self.lo[e]
                };
            }
            Some((i, bound)) => {
                let pivot = w[i];
                if pivot.abs() < 1e-11 {
                    return Err(LpError::Numerical(format!(
                        "pivot magnitude {:.3e} below tolerance",
                        pivot.abs()
                    )));
                }
                let out = self.basis[i];
                self.x[out] = bound;
                self.location[out] = if bound == self.lo[out] {
                    Location::AtLower
                } else {
                    Location::AtUpper
                };
                self.basis[i] = e;
                self.location[e] = Location::Basic;
                // binv <- E * binv with the elementary matrix of this pivot.
                let pivot_row: Vec<f64> = (0..self.m).map(|r| self.binv[[i, r]] / pivot).collect();
                for ii in 0..self.m {
                    if ii == i {
                        continue;
                    }
                    let factor = w[ii];
                    if factor != 0.0 {
                        for r in 0..self.m {
                            self.binv[[ii, r]] -= factor * pivot_row[r];
                        }
                    }
                }
                for r in 0..self.m {
                    self.binv[[i, r]] = pivot_row[r];
                }
                self.pivots_since_refactor += 1;
            }
        }
        Ok(StepOutcome::Moved)
    }

    /// Rebuilds the basis inverse from scratch (Gauss-Jordan with partial
    /// pivoting) and recomputes the basic variable values from the nonbasic
    /// ones, discarding accumulated drift.
    fn refactorize(&mut self) -> Result<(), LpError> {
        let m = self.m;
        let mut b = Array2::zeros((m, m));
        for (i, &var) in self.basis.iter().enumerate() {
            for &(r, v) in &self.cols[var] {
                b[[r, i]] = v;
            }
        }
        let mut inv = Array2::eye(m);
        for col in 0..m {
            let mut piv = col;
            for r in col + 1..m {
                if b[[r, col]].abs() > b[[piv, col]].abs() {
                    piv = r;
                }
            }
            if b[[piv, col]].abs() < 1e-12 {
                return Err(LpError::Numerical("singular basis".into()));
            }
            if piv != col {
                for k in 0..m {
                    b.swap([piv, k], [col, k]);
                    inv.swap([piv, k], [col, k]);
                }
            }
            let d = b[[col, col]];
            for k in 0..m {
                b[[col, k]] /= d;
                inv[[col, k]] /= d;
            }
            for r in 0..m {
                if r != col {
                    let f = b[[r, col]];
                    if f != 0.0 {
                        for k in 0..m {
                            b[[r, k]] -= f * b[[col, k]];
                            inv[[r, k]] -= f * inv[[col, k]];
                        }
                    }
                }
            }
        }
        // B's columns were laid out in basis order, so row i of the inverse
        // already corresponds to basis position i.
        self.binv = inv;
        self.pivots_since_refactor = 0;

        // Recompute basic values: x_B = binv * (rhs - N x_N).
        let mut resid = self.rhs.clone();
        for j in 0..self.total {
            if self.location[j] != Location::Basic && self.x[j] != 0.0 {
                for &(r, v) in &self.cols[j] {
                    resid[r] -= v * self.x[j];
                }
            }
        }
        for i in 0..m {
            let mut acc = 0.0;
            for r in 0..m {
                acc += self.binv[[i, r]] * resid[r];
            }
            self.x[self.basis[i]] = acc;
        }
        Ok(())
    }
}

enum StepOutcome {
    Moved,
    Unbounded,
}
