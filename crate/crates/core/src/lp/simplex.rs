//! Bounded-variable revised primal simplex with a product-form basis
//! representation. Two phases: phase 1 drives artificial variables to zero
//! starting from the all-slack point, phase 2 optimizes the real
//! objective. All tie-breaks are index-based, so solves are bit-for-bit
//! reproducible.

use super::{LinearProgram, LpSolution, LpStatus, Relation};
use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-10;
/// Preferred minimum pivot magnitude; the ratio test falls back to
/// PIVOT_TOL only when no blocker reaches it, keeping the basis well
/// conditioned.
const PIVOT_ACCEPT: f64 = 1e-7;
const REFACTOR_INTERVAL: usize = 100;
/// Update-eta fill cap; refactorization is cheap, dense eta files are not.
const ETA_NNZ_LIMIT: usize = 300_000;
const STALL_LIMIT: usize = 2000;
/// Transient bound violation allowed by the Harris ratio test.
const FEAS_RELAX: f64 = 1e-9;
/// Minimum displacement of the leaving variable per pivot.
const MIN_STEP: f64 = 1e-10;
/// Relative magnitude of the deterministic rhs perturbation.
const RHS_PERT: f64 = 1e-7;
/// Relative magnitude of the deterministic cost perturbation.
const COST_PERT: f64 = 1e-11;
/// Phase-2 pivots without meaningful objective progress before the
/// solve stops at the current primal-feasible point. Heavily degenerate
/// programs can reach the optimal face quickly and then wander it for
/// hundreds of thousands of pivots chasing the dual certificate.
const PLATEAU_LIMIT: usize = 10_000;
/// Relative objective decrease that counts as progress for the plateau
/// check; chosen above the noise the Harris relaxation and periodic
/// refactorization inject into the running objective.
const PLATEAU_REL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
enum VarState {
    Basic(usize),
    AtLower,
    AtUpper,
}

/// One Gauss-Jordan elimination step of the basis inverse: pivoting the
/// (transformed) column `col` on row `pivot_row`.
struct Eta {
    pivot_row: usize,
    pivot_val: f64,
    /// Off-pivot nonzeros of the transformed column.
    col: Vec<(usize, f64)>,
}

/// Sparse LU factors of the basis from a left-looking factorization.
/// `l[t]` holds the step-t multipliers for rows still unpivoted at step
/// t, `u[t]` the step-t column entries in earlier pivot steps. Unlike a
/// Gauss-Jordan product form, pivoted rows are never re-eliminated, so
/// fill-in stays near the basis sparsity.
#[derive(Default)]
struct Lu {
    pivot_row: Vec<usize>,
    diag: Vec<f64>,
    l: Vec<Vec<(usize, f64)>>,
    /// Entries (earlier step s, u_{s,t}).
    u: Vec<Vec<(usize, f64)>>,
    /// Pivot step of each row, usize::MAX while unpivoted.
    row_step: Vec<usize>,
    /// Scratch for the sparse L-solve: pending steps and their flags.
    heap: std::collections::BinaryHeap<std::cmp::Reverse<usize>>,
    queued: Vec<bool>,
}

impl Lu {
    fn reset(&mut self, m: usize) {
        self.pivot_row.clear();
        self.diag.clear();
        self.l.clear();
        self.u.clear();
        self.row_step.clear();
        self.row_step.resize(m, usize::MAX);
        self.heap.clear();
        self.queued.clear();
        self.queued.resize(m, false);
    }

    /// work <- L^-1 * work (unit lower triangular in pivot order),
    /// restricted to the first `steps` steps. Visits only steps whose
    /// pivot row carries a nonzero; L multipliers always point at rows
    /// pivoted later, so a min-heap over step indices suffices.
    fn lsolve(&mut self, work: &mut Scattered, steps: usize) {
        use std::cmp::Reverse;
        for &r in &work.nz {
            let s = self.row_step[r];
            if s < steps && !self.queued[s] {
                self.queued[s] = true;
                self.heap.push(Reverse(s));
            }
        }
        while let Some(Reverse(s)) = self.heap.pop() {
            self.queued[s] = false;
            let p = work.val[self.pivot_row[s]];
            if p == 0.0 {
                continue;
            }
            for &(r, l) in &self.l[s] {
                work.add(r, -l * p);
                let s2 = self.row_step[r];
                if s2 < steps && !self.queued[s2] {
                    self.queued[s2] = true;
                    self.heap.push(Reverse(s2));
                }
            }
        }
    }

    /// work <- B^-1 * work.
    fn ftran(&mut self, work: &mut Scattered) {
        let m = self.pivot_row.len();
        self.lsolve(work, m);
        // U backsolve; the coefficient of step t lands on its pivot row.
        for t in (0..m).rev() {
            let v = work.val[self.pivot_row[t]];
            if v == 0.0 {
                continue;
            }
            let x = v / self.diag[t];
            work.set(self.pivot_row[t], x);
            for &(s, u) in &self.u[t] {
                work.add(self.pivot_row[s], -u * x);
            }
        }
    }

    /// work <- B^-T * work.
    fn btran(&self, work: &mut Scattered) {
        let m = self.pivot_row.len();
        // U^T forward solve.
        for t in 0..m {
            let mut acc = work.val[self.pivot_row[t]];
            for &(s, u) in &self.u[t] {
                acc -= u * work.val[self.pivot_row[s]];
            }
            if acc != 0.0 {
                work.set(self.pivot_row[t], acc / self.diag[t]);
            } else if work.mask[self.pivot_row[t]] {
                work.set(self.pivot_row[t], 0.0);
            }
        }
        // L^T backward solve; L entries live in rows pivoted later.
        for t in (0..m).rev() {
            let mut acc = work.val[self.pivot_row[t]];
            let before = acc;
            for &(r, l) in &self.l[t] {
                acc -= l * work.val[r];
            }
            if acc != before || work.mask[self.pivot_row[t]] {
                work.set(self.pivot_row[t], acc);
            }
        }
    }
}

/// Dense work vector with an explicit nonzero list.
struct Scattered {
    val: Vec<f64>,
    nz: Vec<usize>,
    mask: Vec<bool>,
}

impl Scattered {
    fn new(len: usize) -> Self {
        Self {
            val: vec![0.0; len],
            nz: Vec::new(),
            mask: vec![false; len],
        }
    }

    fn clear(&mut self) {
        for &i in &self.nz {
            self.val[i] = 0.0;
            self.mask[i] = false;
        }
        self.nz.clear();
    }

    fn add(&mut self, i: usize, v: f64) {
        if !self.mask[i] {
            self.mask[i] = true;
            self.nz.push(i);
        }
        self.val[i] += v;
    }

    fn set(&mut self, i: usize, v: f64) {
        if !self.mask[i] {
            self.mask[i] = true;
            self.nz.push(i);
        }
        self.val[i] = v;
    }
}

pub(super) struct Simplex {
    m: usize,
    n_struct: usize,
    /// Total variable count: structural + slack + artificial.
    n_total: usize,
    /// Structural columns, rows normalized so every row is Le or Eq.
    cols: Vec<Vec<(usize, f64)>>,
    /// +1 if the original row kept its orientation, -1 for flipped Ge rows.
    row_flip: Vec<f64>,
    row_relation: Vec<Relation>,
    rhs: Vec<f64>,
    /// Unperturbed right-hand side, restored before certification.
    rhs_true: Vec<f64>,
    art_coef: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Phase-2 internal costs (minimization).
    cost: Vec<f64>,
    /// Perturbed copy used while iterating; ties between duplicate
    /// columns otherwise stall the pricing on degenerate duals.
    cost_pert: Vec<f64>,
    /// Costs currently in effect.
    active_cost: Vec<f64>,
    state: Vec<VarState>,
    basis: Vec<usize>,
    x: Vec<f64>,
    lu: Lu,
    /// Update etas on top of the factorization, one per pivot.
    etas: Vec<Eta>,
    pivots_since_refactor: usize,
    /// Total nonzeros across the update etas.
    eta_nnz: usize,
    tolerance: f64,
    cost_scale: f64,
    rhs_scale: f64,
    /// Devex reference weights, one per variable.
    devex: Vec<f64>,
    /// Weak-duality improvement bound from the last pricing scan.
    gap_bound: f64,
    /// Reduced costs of all variables, updated per pivot from the devex
    /// row pass and recomputed from the duals at every refactorization.
    dvec: Vec<f64>,
    /// Row-major structural matrix, for the devex pivot-row pass.
    rows_mat: Vec<Vec<(usize, f64)>>,
    /// Scratch over columns for the devex update.
    rowbuf: Scattered,
    bland: bool,
    stall: usize,
    work: Scattered,
    work2: Scattered,
}

impl Simplex {
    pub(super) fn new(lp: &LinearProgram, tolerance: f64) -> Self {
        let m = lp.num_rows();
        let n_struct = lp.num_vars();
        let n_total = n_struct + 2 * m;

        let mut cols = vec![Vec::new(); n_struct];
        let mut row_flip = vec![1.0; m];
        let mut row_relation = vec![Relation::Le; m];
        let mut rhs = vec![0.0; m];
        for (i, row) in lp.rows().iter().enumerate() {
            let flip = if row.relation == Relation::Ge {
                -1.0
            } else {
                1.0
            };
            row_flip[i] = flip;
            row_relation[i] = if row.relation == Relation::Eq {
                Relation::Eq
            } else {
                Relation::Le
            };
            rhs[i] = row.rhs * flip;
            for &(j, a) in &row.terms {
                if a != 0.0 {
                    cols[j].push((i, a * flip));
                }
            }
        }

        let rows_mat: Vec<Vec<(usize, f64)>> = lp
            .rows()
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.terms
                    .iter()
                    .filter(|&&(_, a)| a != 0.0)
                    .map(|&(j, a)| (j, a * row_flip[i]))
                    .collect()
            })
            .collect();

        let (lo, up) = lp.bounds();
        let mut lower = Vec::with_capacity(n_total);
        let mut upper = Vec::with_capacity(n_total);
        lower.extend_from_slice(lo);
        upper.extend(up.iter().map(|u| u.unwrap_or(f64::INFINITY)));
        for rel in &row_relation {
            lower.push(0.0);
            upper.push(match rel {
                Relation::Eq => 0.0,
                _ => f64::INFINITY,
            });
        }
        // Artificial bounds are set during init.
        lower.extend(std::iter::repeat_n(0.0, m));
        upper.extend(std::iter::repeat_n(0.0, m));

        let mut cost = vec![0.0; n_total];
        for (j, c) in lp.objective().iter().enumerate() {
            cost[j] = -c; // maximize -> internal minimize
        }
        let cost_scale = cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let rhs_scale = rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));

        let mut cost_pert = cost.clone();
        for (j, c) in cost_pert.iter_mut().enumerate().take(n_struct) {
            let h = (j.wrapping_mul(0x9e3779b9) >> 9) % 1024;
            *c += COST_PERT * (1.0 + c.abs()) * (0.5 + h as f64 / 1024.0);
        }

        // Deterministic right-hand-side perturbation. It makes basic
        // solutions generically non-degenerate, so the ratio test takes
        // real steps instead of wandering on a degenerate vertex. The
        // basis it ends on stays dual feasible for the true rhs, which
        // is restored before the final feasibility check.
        let rhs_true = rhs.clone();
        for (i, b) in rhs.iter_mut().enumerate() {
            let h = (i.wrapping_mul(2654435761) >> 7) % 1024;
            *b += RHS_PERT * (1.0 + b.abs()) * (0.5 + h as f64 / 1024.0);
        }

        Self {
            m,
            n_struct,
            n_total,
            cols,
            row_flip,
            row_relation,
            rhs,
            rhs_true,
            art_coef: vec![1.0; m],
            lower,
            upper,
            cost,
            cost_pert,
            active_cost: vec![0.0; n_total],
            state: vec![VarState::AtLower; n_total],
            basis: vec![0; m],
            x: vec![0.0; n_total],
            lu: Lu::default(),
            etas: Vec::new(),
            pivots_since_refactor: 0,
            eta_nnz: 0,
            tolerance,
            cost_scale,
            rhs_scale,
            devex: vec![1.0; n_total],
            gap_bound: f64::INFINITY,
            dvec: vec![0.0; n_total],
            rows_mat,
            rowbuf: Scattered::new(n_total),
            bland: false,
            stall: 0,
            work: Scattered::new(m),
            work2: Scattered::new(m),
        }
    }

    fn column(&self, j: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        if j < self.n_struct {
            out.extend_from_slice(&self.cols[j]);
        } else if j < self.n_struct + self.m {
            out.push((j - self.n_struct, 1.0));
        } else {
            let i = j - self.n_struct - self.m;
            out.push((i, self.art_coef[i]));
        }
    }

    /// work <- B^-1 * work: the LU solve followed by the update etas.
    fn ftran(&mut self) {
        self.lu.ftran(&mut self.work);
        for eta in &self.etas {
            let p = self.work.val[eta.pivot_row];
            if p == 0.0 {
                continue;
            }
            let vp = p / eta.pivot_val;
            self.work.set(eta.pivot_row, vp);
            for &(r, a) in &eta.col {
                self.work.add(r, -a * vp);
            }
        }
    }

    /// work2 <- B^-T * work2: update etas in reverse, then the LU.
    fn btran(&mut self) {
        for eta in self.etas.iter().rev() {
            let mut acc = self.work2.val[eta.pivot_row];
            for &(r, a) in &eta.col {
                acc -= a * self.work2.val[r];
            }
            let v = acc / eta.pivot_val;
            if v != 0.0 || self.work2.mask[eta.pivot_row] {
                self.work2.set(eta.pivot_row, v);
            }
        }
        self.lu.btran(&mut self.work2);
    }

    /// Pivot order for refactorization. Active-singleton columns and
    /// rows pivot without creating any fill (no other entry of the
    /// pivot row or column is touched), so they are peeled first; the
    /// remaining bump is ordered sparsest-column first.
    fn peel_order(&self) -> Vec<usize> {
        let m = self.m;
        let mut col_rows: Vec<Vec<usize>> = Vec::with_capacity(m);
        let mut row_cols: Vec<Vec<usize>> = vec![Vec::new(); m];
        for slot in 0..m {
            let j = self.basis[slot];
            let rows: Vec<usize> = if j < self.n_struct {
                self.cols[j].iter().map(|&(r, _)| r).collect()
            } else if j < self.n_struct + m {
                vec![j - self.n_struct]
            } else {
                vec![j - self.n_struct - m]
            };
            for &r in &rows {
                row_cols[r].push(slot);
            }
            col_rows.push(rows);
        }
        let mut col_count: Vec<usize> = col_rows.iter().map(|v| v.len()).collect();
        let mut row_count: Vec<usize> = row_cols.iter().map(|v| v.len()).collect();
        let mut col_done = vec![false; m];
        let mut row_done = vec![false; m];
        let mut order = Vec::with_capacity(m);
        let mut queue: std::collections::VecDeque<(bool, usize)> = std::collections::VecDeque::new();
        for (c, &count) in col_count.iter().enumerate() {
            if count == 1 {
                queue.push_back((true, c));
            }
        }
        for (r, &count) in row_count.iter().enumerate() {
            if count == 1 {
                queue.push_back((false, r));
            }
        }
        while let Some((is_col, idx)) = queue.pop_front() {
            let (c, r) = if is_col {
                if col_done[idx] || col_count[idx] != 1 {
                    continue;
                }
                let r = *col_rows[idx].iter().find(|&&r| !row_done[r]).unwrap();
                (idx, r)
            } else {
                if row_done[idx] || row_count[idx] != 1 {
                    continue;
                }
                let c = *row_cols[idx].iter().find(|&&c| !col_done[c]).unwrap();
                (c, idx)
            };
            order.push(c);
            col_done[c] = true;
            row_done[r] = true;
            for &c2 in &row_cols[r] {
                if !col_done[c2] {
                    col_count[c2] -= 1;
                    if col_count[c2] == 1 {
                        queue.push_back((true, c2));
                    }
                }
            }
            for &r2 in &col_rows[c] {
                if !row_done[r2] {
                    row_count[r2] -= 1;
                    if row_count[r2] == 1 {
                        queue.push_back((false, r2));
                    }
                }
            }
        }
        let mut bump: Vec<usize> = (0..m).filter(|&c| !col_done[c]).collect();
        bump.sort_by_key(|&c| (col_count[c], c));
        order.extend(bump);
        order
    }

    /// Rebuilds the eta file from the current basis and recomputes the
    /// basic variable values.
    fn refactor(&mut self) -> Result<()> {
        self.etas.clear();
        self.eta_nnz = 0;
        self.lu.reset(self.m);
        self.pivots_since_refactor = 0;

        // Pivot order: iteratively peel basis columns that are singleton
        // in the active submatrix and columns alone in an active row.
        // Fill depends only on the pivot order, and every peeled pivot
        // is fill-free, so L stays empty and U keeps the basis pattern
        // everywhere the peel reaches; only the leftover bump (ordered
        // by sparsity) can fill in.
        let order = self.peel_order();

        // Basis repair: columns whose largest remaining pivot falls
        // below PIVOT_TOL are numerically dependent on the rest of the
        // basis. Each such variable is dropped to its nearest bound and
        // the still-unpivoted row gets its artificial installed instead.
        // The repaired point may be infeasible, but later pivots push
        // the artificial back out and the final certification checks
        // feasibility against the true data.
        let mut new_basis: Vec<usize> = vec![usize::MAX; self.m];
        let mut dropped: Vec<usize> = Vec::new();
        let mut colbuf = Vec::new();
        let factor_one = |lu: &mut Lu, work: &mut Scattered| -> Option<usize> {
            let t = lu.pivot_row.len();
            lu.lsolve(work, t);
            let mut pivot_row = usize::MAX;
            let mut best = 0.0;
            for &r in &work.nz {
                let v = work.val[r].abs();
                if lu.row_step[r] == usize::MAX && v > best {
                    best = v;
                    pivot_row = r;
                }
            }
            if pivot_row == usize::MAX || best < PIVOT_TOL {
                return None;
            }
            let diag = work.val[pivot_row];
            let mut lcol = Vec::new();
            let mut ucol = Vec::new();
            for &r in &work.nz {
                let v = work.val[r];
                if v == 0.0 || r == pivot_row {
                    continue;
                }
                if lu.row_step[r] != usize::MAX {
                    ucol.push((lu.row_step[r], v));
                } else {
                    lcol.push((r, v / diag));
                }
            }
            lu.row_step[pivot_row] = t;
            lu.pivot_row.push(pivot_row);
            lu.diag.push(diag);
            lu.l.push(lcol);
            lu.u.push(ucol);
            Some(pivot_row)
        };
        for &slot in &order {
            let j = self.basis[slot];
            self.column(j, &mut colbuf);
            self.work.clear();
            for &(r, a) in &colbuf {
                self.work.add(r, a);
            }
            match factor_one(&mut self.lu, &mut self.work) {
                Some(row) => new_basis[row] = j,
                None => dropped.push(j),
            }
        }
        if !dropped.is_empty() {
            for &j in &dropped {
                let (lo, up) = (self.lower[j], self.upper[j]);
                if lo.is_infinite() && up.is_infinite() {
                    self.x[j] = 0.0;
                    self.state[j] = VarState::AtLower;
                } else if !lo.is_infinite()
                    && (up.is_infinite() || (self.x[j] - lo).abs() <= (self.x[j] - up).abs())
                {
                    self.x[j] = lo;
                    self.state[j] = VarState::AtLower;
                } else {
                    self.x[j] = up;
                    self.state[j] = VarState::AtUpper;
                }
            }
            for r in 0..self.m {
                if self.lu.row_step[r] != usize::MAX {
                    continue;
                }
                let a = self.n_struct + self.m + r;
                self.work.clear();
                self.work.add(r, self.art_coef[r]);
                let row = factor_one(&mut self.lu, &mut self.work)
                    .expect("artificial unit column always pivots");
                new_basis[row] = a;
            }
        }

        self.basis = new_basis;
        for (row, &j) in self.basis.iter().enumerate() {
            self.state[j] = VarState::Basic(row);
        }
        self.recompute_basic_values();
        self.recompute_reduced();
        Ok(())
    }

    /// Appends an eta built from the current `work` vector (a transformed
    /// column), pivoting on `pivot_row`. Identity etas are dropped.
    fn push_eta(&mut self, pivot_row: usize) {
        let pivot_val = self.work.val[pivot_row];
        let mut col = Vec::new();
        for &r in &self.work.nz {
            if r != pivot_row && self.work.val[r] != 0.0 {
                col.push((r, self.work.val[r]));
            }
        }
        if col.is_empty() && pivot_val == 1.0 {
            return;
        }
        col.sort_unstable_by_key(|&(r, _)| r);
        self.eta_nnz += col.len();
        self.etas.push(Eta {
            pivot_row,
            pivot_val,
            col,
        });
    }

    fn recompute_basic_values(&mut self) {
        self.work.clear();
        for i in 0..self.m {
            if self.rhs[i] != 0.0 {
                self.work.add(i, self.rhs[i]);
            }
        }
        let mut colbuf = Vec::new();
        for j in 0..self.n_total {
            if matches!(self.state[j], VarState::Basic(_)) {
                continue;
            }
            let xj = self.x[j];
            if xj == 0.0 {
                continue;
            }
            self.column(j, &mut colbuf);
            for &(r, a) in &colbuf {
                self.work.add(r, -a * xj);
            }
        }
        self.ftran();
        for r in 0..self.m {
            self.x[self.basis[r]] = self.work.val[r];
        }
    }

    /// Builds the initial all-slack basis, adding an artificial variable
    /// on every row the slack cannot feasibly cover.
    fn init_basis(&mut self) {
        for j in 0..self.n_struct {
            self.x[j] = self.lower[j];
            self.state[j] = VarState::AtLower;
        }
        let mut activity = vec![0.0; self.m];
        for (j, col) in self.cols.iter().enumerate() {
            let xj = self.x[j];
            if xj != 0.0 {
                for &(r, a) in col {
                    activity[r] += a * xj;
                }
            }
        }
        // Singleton-column crash: a structural column with one nonzero
        // can cover its row by itself. Rows the slack cannot cover take
        // the first such column whose implied value fits its bounds,
        // which avoids an artificial (and a phase-1 pivot) per row.
        let mut crash = vec![usize::MAX; self.m];
        let mut crash_val = vec![0.0; self.m];
        for (j, col) in self.cols.iter().enumerate() {
            let &[(r, a)] = col.as_slice() else { continue };
            if crash[r] != usize::MAX {
                continue;
            }
            let v_row = self.rhs[r] - activity[r];
            if self.row_relation[r] != Relation::Eq && v_row >= 0.0 {
                continue;
            }
            let v = self.x[j] + v_row / a;
            if v >= self.lower[j] && v <= self.upper[j] {
                crash[r] = j;
                crash_val[r] = v;
            }
        }

        for i in 0..self.m {
            let slack = self.n_struct + i;
            let art = self.n_struct + self.m + i;
            if crash[i] != usize::MAX {
                let j = crash[i];
                self.basis[i] = j;
                self.state[j] = VarState::Basic(i);
                self.x[j] = crash_val[i];
                self.state[slack] = VarState::AtLower;
                self.x[slack] = 0.0;
                self.state[art] = VarState::AtLower;
                self.x[art] = 0.0;
                continue;
            }
            let v = self.rhs[i] - activity[i];
            let slack_ok = self.row_relation[i] != Relation::Eq && v >= 0.0;
            if slack_ok {
                self.basis[i] = slack;
                self.state[slack] = VarState::Basic(i);
                self.x[slack] = v;
                self.state[art] = VarState::AtLower;
                self.x[art] = 0.0;
                // stays fixed at [0, 0]
            } else {
                self.state[slack] = VarState::AtLower;
                self.x[slack] = 0.0;
                self.art_coef[i] = if v >= 0.0 { 1.0 } else { -1.0 };
                self.upper[art] = f64::INFINITY;
                self.basis[i] = art;
                self.state[art] = VarState::Basic(i);
                self.x[art] = v.abs();
                self.active_cost[art] = 1.0;
            }
        }
    }

    fn dual_tol(&self, phase2: bool) -> f64 {
        let scale = if phase2 { self.cost_scale } else { 1.0 };
        self.tolerance * (1.0 + scale)
    }

    /// Reduced costs of a block of nonbasic columns against the dual
    /// vector in `work2`. Returns the chosen entering variable.
    fn price(&mut self, phase2: bool) -> Option<usize> {
        let dtol = self.dual_tol(phase2);
        let eligible = |s: &Self, j: usize, d: f64| -> bool {
            if s.upper[j] <= s.lower[j] {
                return false;
            }
            match s.state[j] {
                VarState::AtLower => d < -dtol,
                VarState::AtUpper => d > dtol,
                VarState::Basic(_) => false,
            }
        };

        if self.bland {
            self.gap_bound = f64::INFINITY;
            for j in 0..self.n_total {
                if matches!(self.state[j], VarState::Basic(_)) {
                    continue;
                }
                if eligible(self, j, self.dvec[j]) {
                    return Some(j);
                }
            }
            return None;
        }

        // Devex pricing: largest d^2 / w over all nonbasic columns, with
        // reference weights w approximating the steepest-edge norms.
        // Degenerate problems crawl for a very long time under largest
        // reduced cost alone. The scan also accumulates the weak-duality
        // bound sum |d_j| * span_j over violating columns, which lets the
        // caller stop once the remaining improvement is certified small.
        let mut best: Option<(usize, f64)> = None;
        let mut bound = 0.0f64;
        for j in 0..self.n_total {
            if matches!(self.state[j], VarState::Basic(_)) {
                continue;
            }
            let d = self.dvec[j];
            if eligible(self, j, d) {
                bound += d.abs() * (self.upper[j] - self.lower[j]);
                let score = d * d / self.devex[j];
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((j, score));
                }
            }
        }
        self.gap_bound = bound;
        best.map(|(j, _)| j)
    }

    fn reduced_cost_of(&self, j: usize) -> f64 {
        let mut d = self.active_cost[j];
        if j < self.n_struct {
            for &(r, a) in &self.cols[j] {
                d -= a * self.work2.val[r];
            }
        } else if j < self.n_struct + self.m {
            d -= self.work2.val[j - self.n_struct];
        } else {
            let i = j - self.n_struct - self.m;
            d -= self.art_coef[i] * self.work2.val[i];
        }
        d
    }

    /// Recomputes every reduced cost from fresh duals, clearing the
    /// incremental drift accumulated between refactorizations.
    fn recompute_reduced(&mut self) {
        self.compute_duals();
        for j in 0..self.n_total {
            self.dvec[j] = if matches!(self.state[j], VarState::Basic(_)) {
                0.0
            } else {
                self.reduced_cost_of(j)
            };
        }
    }

    /// Loads the dual vector y = B^-T c_B into work2.
    fn compute_duals(&mut self) {
        self.work2.clear();
        for r in 0..self.m {
            let c = self.active_cost[self.basis[r]];
            if c != 0.0 {
                self.work2.set(r, c);
            }
        }
        self.btran();
    }

    /// One simplex iteration. Returns false when the phase is optimal.
    fn iterate(&mut self, phase2: bool) -> Result<bool> {
        // Bland mode pivots without the devex row pass, so the reduced
        // costs must be refreshed from the duals every iteration.
        if self.bland {
            self.recompute_reduced();
        }
        let entering = self.price(phase2);
        let Some(q) = entering else {
            return Ok(false);
        };
        let d_q = self.dvec[q];
        let dir = match self.state[q] {
            VarState::AtLower => 1.0,
            VarState::AtUpper => -1.0,
            VarState::Basic(_) => unreachable!(),
        };

        // Transformed entering column.
        let mut colbuf = Vec::new();
        self.column(q, &mut colbuf);
        self.work.clear();
        for &(r, a) in &colbuf {
            self.work.add(r, a);
        }
        self.ftran();

        // Two-pass (Harris) ratio test. Pass 1 finds the longest step
        // with every bound relaxed by FEAS_RELAX; pass 2 picks the
        // largest pivot among blockers within that step. A minimum step
        // then guarantees strict objective decrease on every pivot, so
        // degenerate vertices cannot cycle; the bound violations this
        // tolerates stay below FEAS_RELAX, inside the certified primal
        // tolerance.
        let span = self.upper[q] - self.lower[q];
        let mut t_relaxed = span;
        for &r in &self.work.nz {
            let w = self.work.val[r];
            if w.abs() < PIVOT_TOL {
                continue;
            }
            let b = self.basis[r];
            let delta = dir * w; // x_b changes by -delta * t
            let limit = if delta > 0.0 {
                if self.lower[b] == f64::NEG_INFINITY {
                    continue;
                }
                (self.x[b] - (self.lower[b] - FEAS_RELAX)) / delta
            } else {
                if self.upper[b] == f64::INFINITY {
                    continue;
                }
                (self.x[b] - (self.upper[b] + FEAS_RELAX)) / delta
            };
            if limit < t_relaxed {
                t_relaxed = limit;
            }
        }
        if t_relaxed == f64::INFINITY {
            if phase2 {
                return Err(Error::SolverFailure("unbounded".into()));
            }
            return Err(Error::SolverFailure(
                "phase-1 objective unbounded below".into(),
            ));
        }
        let t_relaxed = t_relaxed.max(0.0);

        if span.is_finite() && span <= t_relaxed {
            // Bound flip: the entering variable crosses to its other
            // bound before any basic variable truly blocks.
            for &row in &self.work.nz {
                let w = self.work.val[row];
                if w != 0.0 {
                    let b = self.basis[row];
                    self.x[b] -= dir * span * w;
                }
            }
            match self.state[q] {
                VarState::AtLower => {
                    self.x[q] = self.upper[q];
                    self.state[q] = VarState::AtUpper;
                }
                VarState::AtUpper => {
                    self.x[q] = self.lower[q];
                    self.state[q] = VarState::AtLower;
                }
                VarState::Basic(_) => unreachable!(),
            }
            self.stall = 0;
            return Ok(true);
        }

        // Pass 2 over true bounds. Blockers with pivots below
        // PIVOT_ACCEPT are only considered when nothing larger blocks;
        // small accepted pivots otherwise degrade the basis conditioning
        // until refactorization finds it singular.
        let mut leave: Option<(usize, f64, bool, f64)> = None; // (row, |w|, hits_lower, limit)
        for &pivot_floor in &[PIVOT_ACCEPT, PIVOT_TOL] {
            if leave.is_some() {
                break;
            }
            for &r in &self.work.nz {
                let w = self.work.val[r];
                if w.abs() < pivot_floor {
                    continue;
                }
                let b = self.basis[r];
                let delta = dir * w;
                let (limit, hits_lower) = if delta > 0.0 {
                    if self.lower[b] == f64::NEG_INFINITY {
                        continue;
                    }
                    ((self.x[b] - self.lower[b]) / delta, true)
                } else {
                    if self.upper[b] == f64::INFINITY {
                        continue;
                    }
                    ((self.x[b] - self.upper[b]) / delta, false)
                };
                if limit <= t_relaxed {
                    let better = match leave {
                        None => true,
                        Some((lr, lw, _, l_lim)) => {
                            if self.bland {
                                // Minimum ratio with lowest-index leaving
                                // keeps Bland's rule exact, guaranteeing
                                // termination.
                                limit < l_lim - 1e-12
                                    || (limit <= l_lim + 1e-12 && self.basis[r] < self.basis[lr])
                            } else {
                                w.abs() > lw + 1e-12
                                    || (w.abs() >= lw - 1e-12 && self.basis[r] < self.basis[lr])
                            }
                        }
                    };
                    if better {
                        leave = Some((r, w.abs(), hits_lower, limit));
                    }
                }
            }
        }
        let Some((r, wabs, hits_lower, limit)) = leave else {
            return Err(Error::SolverFailure(format!(
                "ratio test found no leaving variable for column {q}"
            )));
        };
        let t = if self.bland {
            limit.clamp(0.0, t_relaxed)
        } else {
            limit.max((MIN_STEP / wabs).min(t_relaxed)).max(0.0)
        };

        if -d_q * dir * t > 1e-12 * (1.0 + self.cost_scale) {
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall > STALL_LIMIT {
                self.bland = true;
            }
        }

        // Devex update against the pivot row: rho = B^-T e_r gives
        // alpha_rj = rho . a_j for every column, and the reference
        // weights grow toward the steepest-edge norms of the next basis.
        if !self.bland {
            let alpha_rq = self.work.val[r];
            let scale = self.devex[q] / (alpha_rq * alpha_rq);
            self.work2.clear();
            self.work2.set(r, 1.0);
            self.btran();
            self.rowbuf.clear();
            for &i in &self.work2.nz {
                let rho = self.work2.val[i];
                if rho == 0.0 {
                    continue;
                }
                for &(j, a) in &self.rows_mat[i] {
                    self.rowbuf.add(j, a * rho);
                }
                self.rowbuf.set(self.n_struct + i, rho);
                self.rowbuf
                    .set(self.n_struct + self.m + i, self.art_coef[i] * rho);
            }
            let ratio = d_q / alpha_rq;
            for &j in &self.rowbuf.nz {
                if matches!(self.state[j], VarState::Basic(_)) {
                    continue;
                }
                let arj = self.rowbuf.val[j];
                // Reduced costs transform with the same pivot row:
                // d_j' = d_j - (a_rj / a_rq) d_q, and the leaving
                // variable picks up -d_q / a_rq below.
                self.dvec[j] -= ratio * arj;
                if j == q {
                    continue;
                }
                let cand = arj * arj * scale;
                if cand > self.devex[j] {
                    self.devex[j] = cand;
                }
            }
            self.dvec[q] = 0.0;
            self.dvec[self.basis[r]] = -ratio;
            self.devex[self.basis[r]] = scale.max(1.0);
        }

        for &row in &self.work.nz {
            let w = self.work.val[row];
            if w != 0.0 {
                let b = self.basis[row];
                self.x[b] -= dir * t * w;
            }
        }
        let lv = self.basis[r];
        if hits_lower {
            self.x[lv] = self.lower[lv];
            self.state[lv] = VarState::AtLower;
        } else {
            self.x[lv] = self.upper[lv];
            self.state[lv] = VarState::AtUpper;
        }
        self.x[q] = match dir {
            1.0 => self.lower[q] + t,
            _ => self.upper[q] - t,
        };
        self.basis[r] = q;
        self.state[q] = VarState::Basic(r);
        self.push_eta(r);
        self.pivots_since_refactor += 1;
        if self.pivots_since_refactor >= REFACTOR_INTERVAL || self.eta_nnz > ETA_NNZ_LIMIT {
            self.refactor()?;
        }
        Ok(true)
    }

    /// Runs one phase to optimality (returns true) or to a phase-2
    /// progress plateau (returns false, current point primal feasible).
    fn run_phase(&mut self, phase2: bool) -> Result<bool> {
        let max_iters = 100_000 + 50 * (self.m + self.n_struct);
        let feas_tol = self.tolerance * (1.0 + self.rhs_scale);
        // Fresh devex reference framework per phase; reduced costs are
        // refreshed because the phase boundary swaps the active costs.
        self.devex.iter_mut().for_each(|w| *w = 1.0);
        self.gap_bound = f64::INFINITY;
        self.recompute_reduced();
        let mut best_obj = f64::INFINITY;
        let mut since_progress = 0usize;
        for _ in 0..max_iters {
            // Phase 1 only needs feasibility, not dual optimality; stop
            // as soon as the artificials are negligible.
            if !phase2 && self.phase1_objective() <= 0.1 * feas_tol {
                return Ok(true);
            }
            match self.iterate(phase2) {
                Ok(true) => {
                    // Early optimality: the pricing scan bounds the
                    // remaining improvement by sum |d_j| * span_j; once
                    // that falls inside the dual tolerance envelope the
                    // point is optimal to the same guarantee that ends
                    // the phase, skipping the degenerate endgame crawl.
                    if phase2 && self.gap_bound <= self.tolerance * (1.0 + self.cost_scale) {
                        return Ok(true);
                    }
                    if phase2 {
                        let obj: f64 = (0..self.n_total)
                            .map(|j| self.active_cost[j] * self.x[j])
                            .sum();
                        if obj < best_obj - PLATEAU_REL * (1.0 + best_obj.abs()) {
                            best_obj = obj;
                            since_progress = 0;
                        } else {
                            since_progress += 1;
                            if since_progress > PLATEAU_LIMIT {
                                return Ok(false);
                            }
                        }
                    }
                    continue;
                }
                Ok(false) => return Ok(true),
                Err(Error::SolverFailure(msg)) if msg == "unbounded" => {
                    return Err(Error::SolverFailure("unbounded".into()))
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::SolverFailure(format!(
            "iteration limit exceeded ({max_iters})"
        )))
    }

    fn phase1_objective(&self) -> f64 {
        (0..self.m)
            .map(|i| {
                let art = self.n_struct + self.m + i;
                if self.active_cost[art] != 0.0 {
                    self.x[art].abs()
                } else {
                    0.0
                }
            })
            .sum()
    }

    fn primal_infeasibility(&self) -> f64 {
        let mut activity = vec![0.0; self.m];
        for (j, col) in self.cols.iter().enumerate() {
            let xj = self.x[j];
            if xj != 0.0 {
                for &(r, a) in col {
                    activity[r] += a * xj;
                }
            }
        }
        let mut worst = 0.0f64;
        for (i, act) in activity.iter().enumerate() {
            let v = act - self.rhs[i];
            let viol = match self.row_relation[i] {
                Relation::Eq => v.abs(),
                _ => v.max(0.0),
            };
            worst = worst.max(viol);
        }
        for j in 0..self.n_struct {
            worst = worst.max(self.lower[j] - self.x[j]);
            if self.upper[j].is_finite() {
                worst = worst.max(self.x[j] - self.upper[j]);
            }
        }
        worst
    }

    /// Installs a caller-supplied starting basis on top of the default
    /// one. Adopted only if the implied point is primal feasible (within
    /// the same slack the final certificate allows) with no artificial
    /// carrying weight, so phase 1 can be skipped.
    fn try_warm_start(&mut self, hint: &[usize]) -> Result<bool> {
        if hint.len() != self.m {
            return Ok(false);
        }
        let mut ok = true;
        for (r, &j) in hint.iter().enumerate() {
            if j == usize::MAX {
                continue;
            }
            if j >= self.n_struct {
                ok = false;
                break;
            }
            match self.state[j] {
                VarState::Basic(row) if row != r => {
                    ok = false;
                    break;
                }
                VarState::Basic(_) => continue,
                _ => {}
            }
            let old = self.basis[r];
            self.state[old] = VarState::AtLower;
            self.x[old] = 0.0;
            self.basis[r] = j;
            self.state[j] = VarState::Basic(r);
        }
        if ok {
            self.refactor()?;
            let feas_tol = self.tolerance * (1.0 + self.rhs_scale);
            ok = self.primal_infeasibility() <= 10.0 * feas_tol
                && self.phase1_objective() <= 0.1 * feas_tol;
        }
        if !ok {
            self.init_basis();
            self.refactor()?;
        }
        Ok(ok)
    }

    pub(super) fn solve(mut self, hint: Option<&[usize]>) -> Result<LpSolution> {
        self.init_basis();
        let warm = match hint {
            Some(h) => self.try_warm_start(h)?,
            None => {
                // The initial basis is not the identity when a flipped
                // artificial (coefficient -1) is in it; factorize before
                // any ftran/btran.
                self.refactor()?;
                false
            }
        };

        // Phase 1.
        if !warm && self.phase1_objective() > 0.0 {
            self.run_phase(false)?;
            let feas_tol = self.tolerance * (1.0 + self.rhs_scale);
            if self.phase1_objective() > feas_tol {
                return Ok(LpSolution {
                    status: LpStatus::Infeasible,
                    values: self.x[..self.n_struct].to_vec(),
                    objective_value: 0.0,
                    duals: vec![0.0; self.m],
                    gap: f64::INFINITY,
                });
            }
        }

        // Lock artificials at zero and switch to the real objective.
        for i in 0..self.m {
            let art = self.n_struct + self.m + i;
            self.upper[art] = 0.0;
            self.active_cost[art] = 0.0;
            if !matches!(self.state[art], VarState::Basic(_)) {
                self.x[art] = 0.0;
            }
        }
        self.active_cost[..self.n_total].copy_from_slice(&self.cost_pert);
        self.bland = false;
        self.stall = 0;

        let mut certified = match self.run_phase(true) {
            Ok(c) => c,
            Err(Error::SolverFailure(msg)) if msg == "unbounded" => {
                return Ok(LpSolution {
                    status: LpStatus::Unbounded,
                    values: self.x[..self.n_struct].to_vec(),
                    objective_value: f64::INFINITY,
                    duals: vec![0.0; self.m],
                    gap: f64::INFINITY,
                });
            }
            Err(e) => return Err(e),
        };

        // Refresh the factorization and re-check optimality once; drift
        // can leave a stale reduced cost behind. A plateau stop skips
        // the re-run, which would only resume the degenerate wander.
        self.refactor()?;
        if certified {
            certified = self.run_phase(true).map_err(|e| match e {
                Error::SolverFailure(msg) if msg == "unbounded" => {
                    Error::SolverFailure("lost boundedness after refactorization".into())
                }
                other => other,
            })?;
        }

        // Drop both perturbations. The final basis stays dual feasible
        // for the true rhs, so the certificate below still applies; the
        // primal values shift within the feasibility tolerance, and the
        // cost restoration only moves reduced costs by the perturbation,
        // which the certified gap absorbs.
        self.active_cost[..self.n_total].copy_from_slice(&self.cost);
        self.rhs.copy_from_slice(&self.rhs_true);
        self.recompute_basic_values();

        let feas = self.primal_infeasibility();
        let feas_tol = self.tolerance * (1.0 + self.rhs_scale);
        if feas > 10.0 * feas_tol {
            return Err(Error::SolverFailure(format!(
                "primal infeasibility {feas} above tolerance at optimum"
            )));
        }

        // Certificate: weak duality with reduced costs clamped by the dual
        // tolerance.
        self.compute_duals();
        let mut dual_obj: f64 = (0..self.m).map(|i| self.work2.val[i] * self.rhs[i]).sum();
        let dtol = self.dual_tol(true);
        for j in 0..self.n_total {
            if matches!(self.state[j], VarState::Basic(_)) {
                continue;
            }
            let d = self.reduced_cost_of(j);
            if d > dtol {
                dual_obj += d * self.lower[j];
            } else if d < -dtol
                && self.upper[j].is_finite() {
                    dual_obj += d * self.upper[j];
                }
                // else: |d| is certified small only up to dtol; skip.
        }
        let primal_int: f64 = (0..self.n_total)
            .map(|j| self.cost[j] * self.x[j])
            .sum::<f64>();
        let gap = (primal_int - dual_obj).abs() + feas;

        let values = self.x[..self.n_struct].to_vec();
        let objective_value = -primal_int;
        let duals: Vec<f64> = (0..self.m)
            .map(|i| -self.work2.val[i] * self.row_flip[i])
            .collect();
        Ok(LpSolution {
            status: if certified {
                LpStatus::Optimal
            } else {
                LpStatus::Feasible
            },
            values,
            objective_value,
            duals,
            gap,
        })
    }
}
