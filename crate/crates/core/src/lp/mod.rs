//! Generic linear programming: problem construction, a revised-simplex
//! solver with optimality certification, and the randomized rounding used
//! when a labeling relaxation comes back fractional.

mod simplex;

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
pub(crate) struct Row {
    pub terms: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// A linear program in maximization form: bounded variables (lower bound 0
/// by default, optional finite upper bound) and {<=, =, >=} constraint rows.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    objective: Vec<f64>,
    rows: Vec<Row>,
    lower: Vec<f64>,
    upper: Vec<Option<f64>>,
}

impl LinearProgram {
    pub fn maximize(objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            objective,
            rows: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![None; n],
        }
    }

    /// Adds a constraint given as sparse `(variable, coefficient)` terms.
    /// Duplicate variable entries are summed.
    pub fn add_constraint(&mut self, terms: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        let mut merged = terms;
        merged.sort_by_key(|&(j, _)| j);
        merged.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        self.rows.push(Row {
            terms: merged,
            relation,
            rhs,
        });
    }

    pub fn set_lower(&mut self, var: usize, bound: f64) {
        self.lower[var] = bound;
    }

    pub fn set_upper(&mut self, var: usize, bound: f64) {
        self.upper[var] = Some(bound);
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub(crate) fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub(crate) fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub(crate) fn bounds(&self) -> (&[f64], &[Option<f64>]) {
        (&self.lower, &self.upper)
    }

    fn validate(&self) -> Result<()> {
        for (j, c) in self.objective.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::Parameter(format!("objective[{j}] not finite")));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(Error::Parameter(format!("rhs of row {i} not finite")));
            }
            for &(j, a) in &row.terms {
                if j >= self.objective.len() {
                    return Err(Error::Parameter(format!(
                        "row {i} references variable {j} out of range"
                    )));
                }
                if !a.is_finite() {
                    return Err(Error::Parameter(format!("row {i} has non-finite entry")));
                }
            }
        }
        for j in 0..self.objective.len() {
            if !self.lower[j].is_finite() {
                return Err(Error::Parameter(format!("lower bound of {j} not finite")));
            }
            if let Some(u) = self.upper[j] {
                if !u.is_finite() || u < self.lower[j] {
                    return Err(Error::Parameter(format!("bad upper bound of {j}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    /// Primal feasible point whose objective stopped improving, returned
    /// when a heavily degenerate program stalls before the dual
    /// certificate closes. `gap` still bounds the distance to optimal.
    Feasible,
    Infeasible,
    Unbounded,
}

/// Certified solver output. For `Optimal` and `Feasible` the values are
/// primal feasible within the solve tolerance and `gap` bounds the
/// distance to the true optimum via weak duality.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub values: Vec<f64>,
    pub objective_value: f64,
    pub duals: Vec<f64>,
    pub gap: f64,
}

/// Solves `lp` with a bounded-variable revised simplex (deterministic
/// pivoting; Bland's rule as the anti-cycling fallback).
pub fn solve_lp(lp: &LinearProgram, tolerance: f64) -> Result<LpSolution> {
    solve_lp_warm(lp, tolerance, None)
}

/// `solve_lp` with an optional starting basis: `hint[r]` names the
/// variable to make basic in row r (`usize::MAX` keeps the default
/// logical variable). A hint is only adopted when the implied point is
/// primal feasible, in which case phase 1 is skipped; otherwise the
/// solver silently falls back to the cold start, so a wrong hint costs
/// time but never correctness.
pub fn solve_lp_warm(
    lp: &LinearProgram,
    tolerance: f64,
    basic_hint: Option<&[usize]>,
) -> Result<LpSolution> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::Parameter("tolerance must be positive".into()));
    }
    lp.validate()?;
    simplex::Simplex::new(lp, tolerance).solve(basic_hint)
}

/// Kleinberg–Tardos phase rounding of fractional label distributions:
/// repeatedly draw a label uniformly and a threshold uniform on (0, 1],
/// and commit every still-unassigned vertex whose fractional mass for the
/// label reaches the threshold. Deterministic given the seed; integral
/// inputs round to themselves.
///
/// `edges` are `(j, k, weight)` separation penalties; they do not steer
/// the rounding, only the reported separation cost of the result.
pub fn kt_round(
    fractional: &[Vec<f64>],
    edges: &[(usize, usize, f64)],
    seed: u64,
) -> Result<Vec<usize>> {
    if fractional.is_empty() {
        return Ok(Vec::new());
    }
    let labels = fractional[0].len();
    if labels == 0 {
        return Err(Error::Parameter("empty label distribution".into()));
    }
    for (j, dist) in fractional.iter().enumerate() {
        if dist.len() != labels {
            return Err(Error::Parameter(format!(
                "vertex {j} has {} labels, expected {labels}",
                dist.len()
            )));
        }
        if dist.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Parameter(format!(
                "vertex {j} has a negative or non-finite mass"
            )));
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter(format!(
                "vertex {j} distribution sums to {sum}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned = vec![usize::MAX; fractional.len()];
    let mut remaining = fractional.len();
    while remaining > 0 {
        let p = rng.gen_range(0..labels);
        let theta = 1.0 - rng.gen::<f64>(); // uniform on (0, 1]
        for (j, dist) in fractional.iter().enumerate() {
            if assigned[j] == usize::MAX && dist[p] >= theta {
                assigned[j] = p;
                remaining -= 1;
            }
        }
    }

    let _separation: f64 = edges
        .iter()
        .filter(|&&(j, k, _)| assigned[j] != assigned[k])
        .map(|&(_, _, w)| w)
        .sum();
    Ok(assigned)
}
