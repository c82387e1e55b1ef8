//! The E-step: per-vertex assignment costs, the uniform-labeling LP
//! relaxation, MAP label recovery, hard-contiguity enforcement and the
//! global log-likelihood objective.
//!
//! `map_labeling` is the workhorse. It never changes the optimum of the
//! relaxation built by `build_labeling_lp`; it only shrinks the program
//! before handing it to the simplex solver (label pruning, substitution
//! of forced vertices, folding of one-sided separation terms, connected
//! component decomposition). Every reduction is exact for the LP, not
//! just for integral labelings, so an integral reduced optimum certifies
//! the exact MAP labeling.

use crate::error::{Error, Result};
use crate::lp::{kt_round, solve_lp_warm, LinearProgram, LpStatus, Relation};
use crate::mesh::{Mesh, RegisteredSet};
use crate::rigid::RigidTransform;
use rayon::prelude::*;

const LP_TOLERANCE: f64 = 1e-7;
const INTEGRALITY_TOL: f64 = 1e-6;

/// Per-vertex part assignment. Labels are 0-based part ids in
/// `[0, part_count)`; file formats that number parts from 1 translate at
/// the I/O boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartLabeling {
    labels: Vec<usize>,
    part_count: usize,
}

impl PartLabeling {
    /// A labeling over a fixed part universe. Parts may be empty; use
    /// `compacted` to drop them.
    pub fn new(labels: Vec<usize>, part_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Structural("empty labeling".into()));
        }
        if part_count == 0 {
            return Err(Error::Structural("labeling with zero parts".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= part_count) {
            return Err(Error::Structural(format!(
                "label {bad} out of range for {part_count} parts"
            )));
        }
        Ok(Self { labels, part_count })
    }

    /// Renumbers labels by order of first appearance, so every part id in
    /// `[0, part_count)` is used and ids follow the smallest vertex index
    /// of each part.
    pub fn compacted(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Structural("empty labeling".into()));
        }
        let max = *labels.iter().max().unwrap();
        let mut remap = vec![usize::MAX; max + 1];
        let mut next = 0usize;
        let labels = labels
            .into_iter()
            .map(|l| {
                if remap[l] == usize::MAX {
                    remap[l] = next;
                    next += 1;
                }
                remap[l]
            })
            .collect();
        Ok(Self {
            labels,
            part_count: next,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn part_count(&self) -> usize {
        self.part_count
    }

    pub fn part_vertices(&self, part: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == part)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Model parameters: the data variance sigma^2, the edge agreement
/// probability tau in (0.5, 1), and the joint regularization weight
/// gamma. The separation weight s and the anneal ratio delta = sigma^2/s
/// are derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    sigma_sq: f64,
    tau: f64,
    gamma: f64,
}

impl ModelParams {
    pub fn new(sigma_sq: f64, tau: f64, gamma: f64) -> Result<Self> {
        if !sigma_sq.is_finite() || sigma_sq <= 0.0 {
            return Err(Error::Parameter(format!(
                "sigma_sq must be positive and finite, got {sigma_sq}"
            )));
        }
        if !(tau > 0.5 && tau < 1.0) {
            return Err(Error::Parameter(format!(
                "tau must lie in (0.5, 1), got {tau}"
            )));
        }
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::Parameter(format!(
                "gamma must be non-negative, got {gamma}"
            )));
        }
        Ok(Self {
            sigma_sq,
            tau,
            gamma,
        })
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Separation weight s = log(tau) - log(1 - tau) > 0.
    pub fn s(&self) -> f64 {
        self.tau.ln() - (1.0 - self.tau).ln()
    }

    /// Anneal ratio delta = sigma^2 / s. Annealing moves sigma^2 while
    /// tau (hence s) stays fixed.
    pub fn delta(&self) -> f64 {
        self.sigma_sq / self.s()
    }

    pub fn with_sigma_sq(&self, sigma_sq: f64) -> Result<Self> {
        Self::new(sigma_sq, self.tau, self.gamma)
    }
}

/// The N x P grid of per-instance, per-part rigid transforms T_{i,p}.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSet {
    transforms: Vec<Vec<RigidTransform>>,
}

impl TransformSet {
    /// `transforms[i][p]` maps template points of part p into instance i.
    pub fn new(transforms: Vec<Vec<RigidTransform>>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::Structural("transform grid has no instances".into()));
        }
        let p = transforms[0].len();
        if p == 0 {
            return Err(Error::Structural("transform grid has no parts".into()));
        }
        if transforms.iter().any(|row| row.len() != p) {
            return Err(Error::Structural("ragged transform grid".into()));
        }
        Ok(Self { transforms })
    }

    /// A grid holding the same transform for every instance and part.
    pub fn uniform(instance_count: usize, part_count: usize, t: RigidTransform) -> Result<Self> {
        Self::new(vec![vec![t; part_count]; instance_count])
    }

    pub fn instance_count(&self) -> usize {
        self.transforms.len()
    }

    pub fn part_count(&self) -> usize {
        self.transforms[0].len()
    }

    pub fn get(&self, instance: usize, part: usize) -> &RigidTransform {
        &self.transforms[instance][part]
    }

    /// Rebuilds the grid with new part p taking its column from old part
    /// `sources[p]`. Used when splitting or dropping parts.
    pub fn select_parts(&self, sources: &[usize]) -> Result<Self> {
        let old_p = self.part_count();
        if sources.is_empty() {
            return Err(Error::Structural("selecting zero parts".into()));
        }
        if let Some(&bad) = sources.iter().find(|&&p| p >= old_p) {
            return Err(Error::Structural(format!(
                "source part {bad} out of range ({old_p} parts)"
            )));
        }
        Self::new(
            self.transforms
                .iter()
                .map(|row| sources.iter().map(|&p| row[p]).collect())
                .collect(),
        )
    }
}

/// The log-cost c(j,p) of explaining vertex j with part p:
/// -(1/(2 sigma^2)) * sum_i ||z_{i,j} - T_{i,p}(x_j)||^2. Never positive.
pub fn singleton_cost(
    set: &RegisteredSet,
    ts: &TransformSet,
    vertex: usize,
    part: usize,
    params: &ModelParams,
) -> f64 {
    let x = &set.template().points()[vertex];
    let mut sum = 0.0;
    for i in 0..set.instance_count() {
        let mapped = ts.get(i, part).apply(x);
        sum += (set.instance(i)[vertex] - mapped).norm_squared();
    }
    -sum / (2.0 * params.sigma_sq())
}

/// The uniform-labeling LP relaxation over a J x P cost matrix. Variables
/// are the J*P label indicators alpha_{jp} (index j*P + p) followed by one
/// beta_{jkp} per edge and part (index J*P + e*P + p). The objective
/// maximizes sum c(j,p) alpha_{jp} - s * sum_e (1/2) sum_p beta, subject
/// to sum_p alpha_{jp} = 1 for every vertex and beta_{jkp} >= ±(alpha_{jp}
/// - alpha_{kp}); all variables non-negative.
pub fn build_labeling_lp(
    costs: &[Vec<f64>],
    edges: &[(usize, usize)],
    s: f64,
) -> Result<LinearProgram> {
    let (j_count, p_count) = validate_costs(costs, edges, s)?;
    let alpha_vars = j_count * p_count;
    let mut objective = Vec::with_capacity(alpha_vars + edges.len() * p_count);
    for row in costs {
        objective.extend_from_slice(row);
    }
    objective.extend(std::iter::repeat_n(-0.5 * s, edges.len() * p_count));

    let mut lp = LinearProgram::maximize(objective);
    for j in 0..j_count {
        let terms = (0..p_count).map(|p| (j * p_count + p, 1.0)).collect();
        lp.add_constraint(terms, Relation::Eq, 1.0);
    }
    for (e, &(j, k)) in edges.iter().enumerate() {
        for p in 0..p_count {
            let a_j = j * p_count + p;
            let a_k = k * p_count + p;
            let b = alpha_vars + e * p_count + p;
            lp.add_constraint(vec![(a_j, 1.0), (a_k, -1.0), (b, -1.0)], Relation::Le, 0.0);
            lp.add_constraint(vec![(a_k, 1.0), (a_j, -1.0), (b, -1.0)], Relation::Le, 0.0);
        }
    }
    Ok(lp)
}

fn validate_costs(costs: &[Vec<f64>], edges: &[(usize, usize)], s: f64) -> Result<(usize, usize)> {
    if costs.is_empty() {
        return Err(Error::Structural("empty cost matrix".into()));
    }
    let p_count = costs[0].len();
    if p_count == 0 {
        return Err(Error::Structural("cost matrix with zero parts".into()));
    }
    for (j, row) in costs.iter().enumerate() {
        if row.len() != p_count {
            return Err(Error::Structural(format!("ragged cost row {j}")));
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::Structural(format!("non-finite cost at vertex {j}")));
        }
    }
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Parameter(format!(
            "separation weight must be positive, got {s}"
        )));
    }
    for &(j, k) in edges {
        if j >= costs.len() || k >= costs.len() || j == k {
            return Err(Error::Structural(format!("bad edge ({j}, {k})")));
        }
    }
    Ok((costs.len(), p_count))
}

/// MAP labels for a cost matrix over an edge graph, maximizing
/// sum_j c(j, l_j) - s * #{edges with differing labels}. Returns the
/// labels and whether the LP relaxation was integral (in which case the
/// labels are the exact maximum); fractional solutions are rounded with
/// `kt_round` under the given seed.
pub fn map_labeling(
    costs: &[Vec<f64>],
    edges: &[(usize, usize)],
    s: f64,
    seed: u64,
) -> Result<(Vec<usize>, bool)> {
    let (j_count, p_count) = validate_costs(costs, edges, s)?;
    if p_count == 1 {
        return Ok((vec![0; j_count], true));
    }

    let mut degree = vec![0usize; j_count];
    for &(j, k) in edges {
        degree[j] += 1;
        degree[k] += 1;
    }

    // A label p can be dropped at vertex j when its cost deficit against
    // the best label exceeds deg(j) * s: shifting any mass from p to the
    // best label then improves the LP objective strictly, so no optimum
    // uses it.
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(j_count);
    for (j, row) in costs.iter().enumerate() {
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let slack = degree[j] as f64 * s;
        let mut cand: Vec<usize> = (0..p_count).filter(|&p| best - row[p] <= slack).collect();
        if cand.is_empty() {
            cand.push(0); // unreachable, guards float oddities
        }
        candidates.push(cand);
    }

    let mut labels = vec![usize::MAX; j_count];
    let fixed: Vec<bool> = candidates.iter().map(|c| c.len() == 1).collect();
    for j in 0..j_count {
        if fixed[j] {
            labels[j] = candidates[j][0];
        }
    }

    // Effective costs for the free vertices. A fixed neighbor with label
    // p* is worth +s on p* (agreement bonus); an edge label present on
    // only one endpoint carries an unavoidable s/2 separation charge.
    let mut eff = costs.to_vec();
    let mut free_adj: Vec<Vec<usize>> = vec![Vec::new(); j_count];
    let mut free_edges: Vec<(usize, usize)> = Vec::new();
    for &(j, k) in edges {
        match (fixed[j], fixed[k]) {
            (true, true) => {}
            (true, false) => {
                if candidates[k].binary_search(&labels[j]).is_ok() {
                    eff[k][labels[j]] += s;
                }
            }
            (false, true) => {
                if candidates[j].binary_search(&labels[k]).is_ok() {
                    eff[j][labels[k]] += s;
                }
            }
            (false, false) => {
                for &p in &candidates[j] {
                    if candidates[k].binary_search(&p).is_err() {
                        eff[j][p] -= 0.5 * s;
                    }
                }
                for &p in &candidates[k] {
                    if candidates[j].binary_search(&p).is_err() {
                        eff[k][p] -= 0.5 * s;
                    }
                }
                free_adj[j].push(free_edges.len());
                free_adj[k].push(free_edges.len());
                free_edges.push((j, k));
            }
        }
    }

    // Fractional solution assembled across components; fixed vertices are
    // one-hot.
    let mut frac = vec![vec![0.0f64; p_count]; j_count];
    for j in 0..j_count {
        if fixed[j] {
            frac[j][labels[j]] = 1.0;
        }
    }
    let mut integral = true;

    let mut visited = vec![false; j_count];
    for start in 0..j_count {
        if fixed[start] || visited[start] {
            continue;
        }
        // Connected component of free vertices.
        let mut comp = vec![start];
        visited[start] = true;
        let mut head = 0;
        let mut comp_edges: Vec<usize> = Vec::new();
        while head < comp.len() {
            let v = comp[head];
            head += 1;
            for &e in &free_adj[v] {
                let (a, b) = free_edges[e];
                let o = if a == v { b } else { a };
                if !visited[o] {
                    visited[o] = true;
                    comp.push(o);
                }
            }
        }
        for &v in &comp {
            for &e in &free_adj[v] {
                if free_edges[e].0 == v {
                    comp_edges.push(e);
                }
            }
        }
        comp_edges.sort_unstable();

        let comp_integral = solve_component(
            &comp,
            &comp_edges,
            &free_edges,
            &candidates,
            &eff,
            s,
            &mut frac,
        )?;
        integral = integral && comp_integral;
    }

    if integral {
        for j in 0..j_count {
            if !fixed[j] {
                let (best, _) = frac[j]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .unwrap();
                labels[j] = best;
            }
        }
        return Ok((labels, true));
    }

    // Fractional somewhere: clean tiny LP noise out of the distributions
    // and round everything together.
    for row in &mut frac {
        for v in row.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let weighted: Vec<(usize, usize, f64)> = edges.iter().map(|&(j, k)| (j, k, s)).collect();
    let rounded = kt_round(&frac, &weighted, seed)?;
    Ok((rounded, false))
}

/// Solves one free-vertex component's reduced LP and scatters the
/// alpha values into `frac`. Returns whether the solution was integral.
fn solve_component(
    comp: &[usize],
    comp_edges: &[usize],
    free_edges: &[(usize, usize)],
    candidates: &[Vec<usize>],
    eff: &[Vec<f64>],
    s: f64,
    frac: &mut [Vec<f64>],
) -> Result<bool> {
    // Variable layout: alpha vars per vertex in comp order, then beta
    // vars per edge for labels candidate on both endpoints.
    let mut alpha_base = vec![0usize; comp.len()];
    let mut var_count = 0usize;
    let mut local = vec![usize::MAX; frac.len()];
    for (ci, &v) in comp.iter().enumerate() {
        local[v] = ci;
        alpha_base[ci] = var_count;
        var_count += candidates[v].len();
    }

    let mut objective = Vec::with_capacity(var_count);
    for &v in comp {
        // Shifting each row to a zero maximum keeps the argmax and the
        // conditioning; the true objective is recomputed afterwards.
        let shift = candidates[v]
            .iter()
            .map(|&p| eff[v][p])
            .fold(f64::NEG_INFINITY, f64::max);
        for &p in &candidates[v] {
            objective.push(eff[v][p] - shift);
        }
    }

    // Edge terms enter as split differences d+ - d- = a_jp - a_kp with
    // cost s/2 on each half: at the optimum d+ + d- equals the absolute
    // difference, matching the two-inequality form, but each half is a
    // singleton column on a single equality row, which keeps the basis
    // sparse and halves the row count.
    let mut diff: Vec<(usize, usize, usize)> = Vec::new(); // (edge, label, d+ var; d- follows)
    for &e in comp_edges {
        let (j, k) = free_edges[e];
        for &p in &candidates[j] {
            if candidates[k].binary_search(&p).is_ok() {
                diff.push((e, p, var_count));
                objective.push(-0.5 * s);
                objective.push(-0.5 * s);
                var_count += 2;
            }
        }
    }

    let mut lp = LinearProgram::maximize(objective);
    for (ci, &v) in comp.iter().enumerate() {
        let terms = (0..candidates[v].len())
            .map(|o| (alpha_base[ci] + o, 1.0))
            .collect();
        lp.add_constraint(terms, Relation::Eq, 1.0);
    }
    let alpha_var = |v: usize, p: usize| -> usize {
        let ci = local[v];
        alpha_base[ci] + candidates[v].binary_search(&p).unwrap()
    };
    for &(e, p, dv) in &diff {
        let (j, k) = free_edges[e];
        let (aj, ak) = (alpha_var(j, p), alpha_var(k, p));
        lp.add_constraint(
            vec![(aj, 1.0), (ak, -1.0), (dv, -1.0), (dv + 1, 1.0)],
            Relation::Eq,
            0.0,
        );
    }
    for v in 0..var_count {
        lp.set_upper(v, 1.0);
    }

    // Warm start from the greedy labeling: its basis (best alpha per
    // vertex row, the sign-matching difference half per edge row) is
    // primal feasible, so the solver skips phase 1 and starts phase 2
    // one or two pivots from the optimum on easy instances.
    let mut greedy: Vec<usize> = comp
        .iter()
        .map(|&v| {
            candidates[v]
                .iter()
                .copied()
                .max_by(|&a, &b| eff[v][a].partial_cmp(&eff[v][b]).unwrap().then(b.cmp(&a)))
                .unwrap()
        })
        .collect();
    // Local-move sweeps sharpen the start: each vertex takes the label
    // maximizing its own term plus s per agreeing neighbor, which is
    // monotone in the integral objective. With many near-duplicate
    // labels this repairs boundary disagreements the simplex would
    // otherwise fix one degenerate pivot at a time.
    let mut nbr: Vec<Vec<usize>> = vec![Vec::new(); comp.len()];
    for &e in comp_edges {
        let (j, k) = free_edges[e];
        nbr[local[j]].push(local[k]);
        nbr[local[k]].push(local[j]);
    }
    let p_count = eff.first().map_or(0, |row| row.len());
    for _ in 0..10 {
        for _ in 0..50 {
            let mut changed = false;
            for ci in 0..comp.len() {
                let v = comp[ci];
                let score = |p: usize| {
                    eff[v][p] + s * nbr[ci].iter().filter(|&&u| greedy[u] == p).count() as f64
                };
                let best = candidates[v]
                    .iter()
                    .copied()
                    .max_by(|&a, &b| score(a).partial_cmp(&score(b)).unwrap().then(b.cmp(&a)))
                    .unwrap();
                if best != greedy[ci] {
                    greedy[ci] = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        // Collapse moves: relabel everything carrying label p to some q
        // at once. Near-duplicate labels leave per-vertex moves stuck
        // while a whole-group swap removes the boundary penalty, which
        // is exactly the slow degenerate path through the LP.
        let mut collapsed = false;
        for p in 0..p_count {
            let members: Vec<usize> = (0..comp.len()).filter(|&ci| greedy[ci] == p).collect();
            if members.is_empty() {
                continue;
            }
            let mut cnt = vec![0usize; p_count];
            let mut unary = vec![0.0f64; p_count];
            for &ci in &members {
                let v = comp[ci];
                for &q in &candidates[v] {
                    cnt[q] += 1;
                    unary[q] += eff[v][q];
                }
            }
            let mut boundary = vec![0.0f64; p_count];
            for &ci in &members {
                for &u in &nbr[ci] {
                    if greedy[u] != p {
                        boundary[greedy[u]] += s;
                    }
                }
            }
            let base = unary[p];
            let mut best: Option<(usize, f64)> = None;
            for q in 0..p_count {
                if q == p || cnt[q] != members.len() {
                    continue;
                }
                let gain = unary[q] - base + boundary[q];
                if gain > 1e-12 && best.is_none_or(|(_, g)| gain > g) {
                    best = Some((q, gain));
                }
            }
            if let Some((q, _)) = best {
                for &ci in &members {
                    greedy[ci] = q;
                }
                collapsed = true;
            }
        }
        if !collapsed {
            break;
        }
    }
    let mut hint: Vec<usize> = comp
        .iter()
        .map(|&v| alpha_var(v, greedy[local[v]]))
        .collect();
    for &(e, p, dv) in &diff {
        let (j, k) = free_edges[e];
        let d = (greedy[local[j]] == p) as i32 - (greedy[local[k]] == p) as i32;
        hint.push(if d >= 0 { dv } else { dv + 1 });
    }

    let sol = solve_lp_warm(&lp, LP_TOLERANCE, Some(&hint))?;
    if !matches!(sol.status, LpStatus::Optimal | LpStatus::Feasible) {
        return Err(Error::SolverFailure(format!(
            "labeling relaxation came back {:?}",
            sol.status
        )));
    }

    let mut integral = true;
    for (ci, &v) in comp.iter().enumerate() {
        for (o, &p) in candidates[v].iter().enumerate() {
            let a = sol.values[alpha_base[ci] + o];
            if a.min(1.0 - a).abs() > INTEGRALITY_TOL {
                integral = false;
            }
            frac[v][p] = a;
        }
    }
    Ok(integral)
}

/// The labeling outcome of one E-step.
#[derive(Debug, Clone)]
pub struct EStepOutcome {
    pub labeling: PartLabeling,
    pub objective: f64,
    pub was_integral: bool,
}

/// MAP part labels for fixed transforms: builds the singleton costs,
/// solves the uniform-labeling relaxation and scores the result with the
/// full log-likelihood objective.
pub fn e_step(
    set: &RegisteredSet,
    ts: &TransformSet,
    mesh: &Mesh,
    params: &ModelParams,
    seed: u64,
) -> Result<EStepOutcome> {
    check_dimensions(set, ts, mesh)?;
    let p_count = ts.part_count();
    let costs: Vec<Vec<f64>> = (0..mesh.vertex_count())
        .into_par_iter()
        .map(|j| {
            (0..p_count)
                .map(|p| singleton_cost(set, ts, j, p, params))
                .collect()
        })
        .collect();
    let (labels, was_integral) = if p_count == 1 {
        (vec![0; mesh.vertex_count()], true)
    } else {
        map_labeling(&costs, mesh.edges(), params.s(), seed)?
    };
    let objective = scored(&costs, mesh.edges(), &labels, params.tau());
    Ok(EStepOutcome {
        labeling: PartLabeling::new(labels, p_count)?,
        objective,
        was_integral,
    })
}

/// Splits every part into its connected components, duplicating the
/// split part's transforms, and compacts part ids by smallest member
/// vertex. The objective is exactly unchanged: singleton costs keep their
/// transforms and no edge can join two components of one former part.
pub fn enforce_hard_contiguity(
    labeling: &PartLabeling,
    ts: &TransformSet,
    mesh: &Mesh,
) -> Result<(PartLabeling, TransformSet)> {
    if labeling.labels().len() != mesh.vertex_count() {
        return Err(Error::Structural(format!(
            "labeling covers {} vertices, mesh has {}",
            labeling.labels().len(),
            mesh.vertex_count()
        )));
    }
    if labeling.part_count() > ts.part_count() {
        return Err(Error::Structural(format!(
            "labeling has {} parts, transform grid only {}",
            labeling.part_count(),
            ts.part_count()
        )));
    }
    let mut pieces: Vec<(usize, usize, Vec<usize>)> = Vec::new(); // (min vertex, source part, members)
    for part in 0..labeling.part_count() {
        let members = labeling.part_vertices(part);
        if members.is_empty() {
            continue;
        }
        for comp in mesh.connected_components(&members) {
            pieces.push((comp[0], part, comp));
        }
    }
    pieces.sort_by_key(|&(min, _, _)| min);

    let mut labels = vec![0usize; mesh.vertex_count()];
    let mut sources = Vec::with_capacity(pieces.len());
    for (new_id, (_, src, members)) in pieces.iter().enumerate() {
        sources.push(*src);
        for &v in members {
            labels[v] = new_id;
        }
    }
    let labeling = PartLabeling::new(labels, sources.len())?;
    let ts = ts.select_parts(&sources)?;
    Ok((labeling, ts))
}

/// The full log-likelihood objective: singleton costs of the assigned
/// labels plus log tau per agreeing edge and log(1 - tau) per separating
/// edge. Constant normalizers are omitted.
pub fn objective(
    set: &RegisteredSet,
    ts: &TransformSet,
    labeling: &PartLabeling,
    mesh: &Mesh,
    params: &ModelParams,
) -> Result<f64> {
    check_dimensions(set, ts, mesh)?;
    if labeling.labels().len() != mesh.vertex_count() || labeling.part_count() > ts.part_count() {
        return Err(Error::Structural(
            "labeling inconsistent with mesh or transforms".into(),
        ));
    }
    let data: Vec<f64> = (0..mesh.vertex_count())
        .into_par_iter()
        .map(|j| singleton_cost(set, ts, j, labeling.labels()[j], params))
        .collect();
    let ln_agree = params.tau().ln();
    let ln_split = (1.0 - params.tau()).ln();
    let mut total = 0.0;
    for c in data {
        total += c;
    }
    for &(j, k) in mesh.edges() {
        total += if labeling.labels()[j] == labeling.labels()[k] {
            ln_agree
        } else {
            ln_split
        };
    }
    Ok(total)
}

/// Same objective evaluated from a precomputed cost matrix.
fn scored(costs: &[Vec<f64>], edges: &[(usize, usize)], labels: &[usize], tau: f64) -> f64 {
    let ln_agree = tau.ln();
    let ln_split = (1.0 - tau).ln();
    let mut total = 0.0;
    for (j, row) in costs.iter().enumerate() {
        total += row[labels[j]];
    }
    for &(j, k) in edges {
        total += if labels[j] == labels[k] {
            ln_agree
        } else {
            ln_split
        };
    }
    total
}

fn check_dimensions(set: &RegisteredSet, ts: &TransformSet, mesh: &Mesh) -> Result<()> {
    if mesh.vertex_count() != set.template().vertex_count() {
        return Err(Error::Structural(format!(
            "mesh has {} vertices, template {}",
            mesh.vertex_count(),
            set.template().vertex_count()
        )));
    }
    if ts.instance_count() != set.instance_count() {
        return Err(Error::Structural(format!(
            "transform grid covers {} instances, set has {}",
            ts.instance_count(),
            set.instance_count()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::solve_lp;
    use approx::assert_relative_eq;
    use nalgebra::{Point3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path_mesh(j: usize) -> Mesh {
        let points = (0..j).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let edges = (0..j - 1).map(|i| (i, i + 1)).collect();
        Mesh::from_edge_list(points, edges)
    }

    fn params(sigma_sq: f64, tau: f64) -> ModelParams {
        ModelParams::new(sigma_sq, tau, 0.0).unwrap()
    }

    /// sum_j c(j, l_j) - s * #separating edges: the integral value of the
    /// relaxation objective.
    fn lp_score(costs: &[Vec<f64>], edges: &[(usize, usize)], labels: &[usize], s: f64) -> f64 {
        let mut v: f64 = labels.iter().enumerate().map(|(j, &l)| costs[j][l]).sum();
        for &(j, k) in edges {
            if labels[j] != labels[k] {
                v -= s;
            }
        }
        v
    }

    fn brute_force_best(costs: &[Vec<f64>], edges: &[(usize, usize)], s: f64) -> f64 {
        let j = costs.len();
        let p = costs[0].len();
        let mut best = f64::NEG_INFINITY;
        let mut labels = vec![0usize; j];
        loop {
            best = best.max(lp_score(costs, edges, &labels, s));
            let mut i = 0;
            loop {
                if i == j {
                    return best;
                }
                labels[i] += 1;
                if labels[i] < p {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
        }
    }

    fn random_costs(rng: &mut ChaCha8Rng, j: usize, p: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..j)
            .map(|_| (0..p).map(|_| -scale * rng.gen::<f64>()).collect())
            .collect()
    }

    #[test]
    fn part_labeling_validates() {
        assert!(PartLabeling::new(vec![0, 1, 2], 3).is_ok());
        assert!(PartLabeling::new(vec![0, 3], 3).is_err());
        assert!(PartLabeling::new(vec![], 1).is_err());
        let l = PartLabeling::new(vec![0, 2, 0], 3).unwrap();
        assert!(l.part_vertices(1).is_empty());
    }

    #[test]
    fn compaction_orders_by_first_appearance() {
        let l = PartLabeling::compacted(vec![5, 5, 2, 5, 9, 2]).unwrap();
        assert_eq!(l.labels(), &[0, 0, 1, 0, 2, 1]);
        assert_eq!(l.part_count(), 3);
        assert_eq!(l.part_vertices(0), vec![0, 1, 3]);
    }

    #[test]
    fn params_validate_and_derive() {
        assert!(ModelParams::new(0.0, 0.9, 0.0).is_err());
        assert!(ModelParams::new(1.0, 0.5, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.0, 0.0).is_err());
        assert!(ModelParams::new(1.0, 0.9, -1.0).is_err());
        let p = params(2.0, 0.9);
        assert_relative_eq!(p.s(), (0.9f64 / 0.1).ln(), max_relative = 1e-12);
        assert_relative_eq!(p.delta(), 2.0 / (9.0f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn transform_set_shape_checks() {
        let id = RigidTransform::identity();
        assert!(TransformSet::new(vec![]).is_err());
        assert!(TransformSet::new(vec![vec![id], vec![]]).is_err());
        let ts = TransformSet::uniform(2, 3, id).unwrap();
        assert_eq!(ts.instance_count(), 2);
        assert_eq!(ts.part_count(), 3);
        let sel = ts.select_parts(&[2, 2, 0]).unwrap();
        assert_eq!(sel.part_count(), 3);
        assert!(ts.select_parts(&[5]).is_err());
    }

    fn tiny_set(offsets: &[Vector3<f64>]) -> RegisteredSet {
        // Two-vertex template; every instance displaces vertex 0 by the
        // given offset and keeps vertex 1 in place.
        let template = path_mesh(2);
        let instances = offsets
            .iter()
            .map(|o| vec![Point3::new(0.0, 0.0, 0.0) + o, Point3::new(1.0, 0.0, 0.0)])
            .collect();
        RegisteredSet::new(template, instances).unwrap()
    }

    #[test]
    fn singleton_cost_perfect_fit_is_zero() {
        let set = tiny_set(&[Vector3::zeros(), Vector3::zeros()]);
        let ts = TransformSet::uniform(2, 1, RigidTransform::identity()).unwrap();
        assert_eq!(singleton_cost(&set, &ts, 0, 0, &params(1.0, 0.9)), 0.0);
        assert_eq!(singleton_cost(&set, &ts, 1, 0, &params(1.0, 0.9)), 0.0);
    }

    #[test]
    fn singleton_cost_unit_residual() {
        // One instance, squared residual 2 sigma^2, cost -1.
        let set = tiny_set(&[Vector3::new(2.0f64.sqrt(), 0.0, 0.0)]);
        let ts = TransformSet::uniform(1, 1, RigidTransform::identity()).unwrap();
        let c = singleton_cost(&set, &ts, 0, 0, &params(1.0, 0.9));
        assert_relative_eq!(c, -1.0, max_relative = 1e-12);
    }

    #[test]
    fn singleton_cost_sums_over_instances() {
        // Squared residuals {sigma^2, 2 sigma^2, 3 sigma^2} with
        // sigma^2 = 1 sum to cost -3.
        let set = tiny_set(&[
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0f64.sqrt(), 0.0, 0.0),
            Vector3::new(3.0f64.sqrt(), 0.0, 0.0),
        ]);
        let ts = TransformSet::uniform(3, 1, RigidTransform::identity()).unwrap();
        let c = singleton_cost(&set, &ts, 0, 0, &params(1.0, 0.9));
        assert_relative_eq!(c, -3.0, max_relative = 1e-12);
    }

    #[test]
    fn lp_shape_single_vertex() {
        let lp = build_labeling_lp(&[vec![-1.0, -2.0]], &[], 1.0).unwrap();
        assert_eq!(lp.num_vars(), 2);
        assert_eq!(lp.num_rows(), 1);
    }

    #[test]
    fn lp_shape_path_of_three() {
        let costs = vec![vec![-1.0, -2.0]; 3];
        let lp = build_labeling_lp(&costs, &[(0, 1), (1, 2)], 1.0).unwrap();
        assert_eq!(lp.num_vars(), 10);
        assert_eq!(lp.num_rows(), 3 + 8);
    }

    #[test]
    fn lp_huge_separation_merges_labels() {
        // Costs pull the two vertices to different labels, but with the
        // separation weight dominating both take the label with the
        // greater cost total: c(0,0)+c(1,0) = -3 beats -4.
        let costs = vec![vec![-1.0, -3.0], vec![-2.0, -1.0]];
        let lp = build_labeling_lp(&costs, &[(0, 1)], 100.0).unwrap();
        let sol = solve_lp(&lp, 1e-9).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!(sol.values[0] > 0.99 && sol.values[2] > 0.99);
        assert_relative_eq!(sol.objective_value, -3.0, epsilon = 1e-7);
    }

    #[test]
    fn map_labeling_single_part() {
        let costs = vec![vec![-1.0]; 4];
        let (labels, integral) = map_labeling(&costs, &[(0, 1), (1, 2)], 1.0, 0).unwrap();
        assert_eq!(labels, vec![0; 4]);
        assert!(integral);
    }

    #[test]
    fn map_labeling_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut integral_runs = 0;
        for trial in 0..40 {
            let j = 2 + (trial % 7);
            let p = 2 + (trial % 2);
            let costs = random_costs(&mut rng, j, p, 3.0);
            let edges: Vec<(usize, usize)> = (0..j - 1).map(|i| (i, i + 1)).collect();
            let s = 0.5 + rng.gen::<f64>();
            let best = brute_force_best(&costs, &edges, s);
            let (labels, integral) = map_labeling(&costs, &edges, s, 11).unwrap();
            if integral {
                integral_runs += 1;
                let got = lp_score(&costs, &edges, &labels, s);
                assert_relative_eq!(got, best, epsilon = 1e-9);
            }
        }
        assert!(integral_runs >= 35, "only {integral_runs}/40 integral");
    }

    #[test]
    fn map_labeling_agrees_with_full_relaxation() {
        // The reduced solve must land on the same optimum as the LP built
        // without any reductions.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..15 {
            let j = 3 + (trial % 5);
            let costs = random_costs(&mut rng, j, 3, 2.0);
            let mut edges: Vec<(usize, usize)> = (0..j - 1).map(|i| (i, i + 1)).collect();
            if trial % 2 == 0 {
                edges.push((0, j - 1)); // ring
            }
            let s = 0.4 + rng.gen::<f64>();
            let (labels, integral) = map_labeling(&costs, &edges, s, 3).unwrap();
            let full = solve_lp(&build_labeling_lp(&costs, &edges, s).unwrap(), 1e-9).unwrap();
            assert_eq!(full.status, LpStatus::Optimal);
            if integral {
                let got = lp_score(&costs, &edges, &labels, s);
                assert_relative_eq!(got, full.objective_value, epsilon = 1e-6);
            } else {
                assert!(lp_score(&costs, &edges, &labels, s) <= full.objective_value + 1e-6);
            }
        }
    }

    #[test]
    fn map_labeling_invariant_to_per_vertex_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let costs = random_costs(&mut rng, 6, 3, 2.0);
            let edges: Vec<(usize, usize)> = (0..5).map(|i| (i, i + 1)).collect();
            let shifted: Vec<Vec<f64>> = costs
                .iter()
                .enumerate()
                .map(|(j, row)| row.iter().map(|c| c + 0.37 * j as f64).collect())
                .collect();
            let a = map_labeling(&costs, &edges, 0.8, 5).unwrap();
            let b = map_labeling(&shifted, &edges, 0.8, 5).unwrap();
            if a.1 && b.1 {
                assert_relative_eq!(
                    lp_score(&costs, &edges, &a.0, 0.8),
                    lp_score(&costs, &edges, &b.0, 0.8),
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn e_step_two_part_hinge_noise_free() {
        // Two rigid halves of a path, second half translated differently
        // per instance. With ground-truth transforms supplied the true
        // labeling comes back exactly.
        let j = 8;
        let template = path_mesh(j);
        let shift = Vector3::new(0.0, 2.0, 0.0);
        let mut instances = Vec::new();
        for i in 0..3 {
            let f = (i + 1) as f64;
            instances.push(
                (0..j)
                    .map(|v| {
                        let p = template.points()[v];
                        if v < j / 2 {
                            p
                        } else {
                            p + f * shift
                        }
                    })
                    .collect(),
            );
        }
        let set = RegisteredSet::new(template.clone(), instances).unwrap();
        let ts = TransformSet::new(
            (0..3)
                .map(|i| {
                    let f = (i + 1) as f64;
                    vec![
                        RigidTransform::identity(),
                        RigidTransform::from_rotation_vector(Vector3::zeros(), f * shift),
                    ]
                })
                .collect(),
        )
        .unwrap();
        let out = e_step(&set, &ts, &template, &params(0.01, 0.9), 0).unwrap();
        assert!(out.was_integral);
        assert_eq!(out.labeling.labels(), &[0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn contiguity_split_on_path() {
        let mesh = path_mesh(5);
        let labeling = PartLabeling::new(vec![0, 0, 1, 0, 0], 2).unwrap();
        let ts = TransformSet::new(vec![vec![
            RigidTransform::identity(),
            RigidTransform::from_rotation_vector(Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)),
        ]])
        .unwrap();
        let (split, new_ts) = enforce_hard_contiguity(&labeling, &ts, &mesh).unwrap();
        assert_eq!(split.labels(), &[0, 0, 1, 2, 2]);
        assert_eq!(split.part_count(), 3);
        assert_eq!(new_ts.get(0, 0), new_ts.get(0, 2));
        assert_eq!(new_ts.get(0, 1), ts.get(0, 1));
    }

    #[test]
    fn contiguity_keeps_contiguous_labeling() {
        let mesh = path_mesh(4);
        let labeling = PartLabeling::new(vec![0, 0, 1, 1], 2).unwrap();
        let ts = TransformSet::uniform(1, 2, RigidTransform::identity()).unwrap();
        let (out, _) = enforce_hard_contiguity(&labeling, &ts, &mesh).unwrap();
        assert_eq!(out.labels(), labeling.labels());
    }

    #[test]
    fn contiguity_splits_disjoint_components() {
        // Two disconnected path pieces sharing one label.
        let points = (0..4).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let mesh = Mesh::from_edge_list(points, vec![(0, 1), (2, 3)]);
        let labeling = PartLabeling::new(vec![0, 0, 0, 0], 1).unwrap();
        let ts = TransformSet::uniform(1, 1, RigidTransform::identity()).unwrap();
        let (out, new_ts) = enforce_hard_contiguity(&labeling, &ts, &mesh).unwrap();
        assert_eq!(out.part_count(), 2);
        assert_eq!(out.labels(), &[0, 0, 1, 1]);
        assert_eq!(new_ts.get(0, 0), new_ts.get(0, 1));
    }

    #[test]
    fn contiguity_preserves_objective_bitwise() {
        let mesh = path_mesh(6);
        let instances = vec![mesh.points().to_vec()];
        let set = RegisteredSet::new(mesh.clone(), instances).unwrap();
        let ts = TransformSet::new(vec![vec![
            RigidTransform::identity(),
            RigidTransform::from_rotation_vector(Vector3::zeros(), Vector3::new(0.3, 0.0, 0.0)),
        ]])
        .unwrap();
        let labeling = PartLabeling::new(vec![0, 1, 0, 0, 1, 1], 2).unwrap();
        let p = params(0.5, 0.8);
        let before = objective(&set, &ts, &labeling, &mesh, &p).unwrap();
        let (split, split_ts) = enforce_hard_contiguity(&labeling, &ts, &mesh).unwrap();
        let after = objective(&set, &split_ts, &split, &mesh, &p).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn objective_perfect_fit_uniform_labeling() {
        let mesh = path_mesh(4);
        let set = RegisteredSet::new(mesh.clone(), vec![mesh.points().to_vec()]).unwrap();
        let ts = TransformSet::uniform(1, 1, RigidTransform::identity()).unwrap();
        let labeling = PartLabeling::new(vec![0; 4], 1).unwrap();
        let p = params(1.0, 0.9);
        let got = objective(&set, &ts, &labeling, &mesh, &p).unwrap();
        assert_relative_eq!(got, 3.0 * 0.9f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn objective_one_disagreeing_edge() {
        let mesh = path_mesh(4);
        let set = RegisteredSet::new(mesh.clone(), vec![mesh.points().to_vec()]).unwrap();
        let ts = TransformSet::uniform(1, 2, RigidTransform::identity()).unwrap();
        let labeling = PartLabeling::new(vec![0, 0, 1, 1], 2).unwrap();
        let p = params(1.0, 0.9);
        let got = objective(&set, &ts, &labeling, &mesh, &p).unwrap();
        assert_relative_eq!(got, 2.0 * 0.9f64.ln() + 0.1f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn objective_incremental_consistency() {
        // Relabeling one vertex changes the objective by exactly the
        // local singleton delta plus the incident edge deltas.
        let mesh = path_mesh(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let instance: Vec<Point3<f64>> = mesh
            .points()
            .iter()
            .map(|p| p + Vector3::new(rng.gen::<f64>(), rng.gen(), rng.gen()))
            .collect();
        let set = RegisteredSet::new(mesh.clone(), vec![instance]).unwrap();
        let ts = TransformSet::new(vec![vec![
            RigidTransform::identity(),
            RigidTransform::from_rotation_vector(Vector3::zeros(), Vector3::new(0.0, 0.5, 0.0)),
        ]])
        .unwrap();
        let p = params(0.7, 0.85);
        let a = PartLabeling::new(vec![0, 0, 0, 1, 1], 2).unwrap();
        let b = PartLabeling::new(vec![0, 0, 1, 1, 1], 2).unwrap();
        let delta = objective(&set, &ts, &b, &mesh, &p).unwrap()
            - objective(&set, &ts, &a, &mesh, &p).unwrap();
        let local = singleton_cost(&set, &ts, 2, 1, &p) - singleton_cost(&set, &ts, 2, 0, &p)
            + ((1.0f64 - 0.85).ln() - 0.85f64.ln()) // edge (1,2) now splits
            + (0.85f64.ln() - (1.0f64 - 0.85).ln()); // edge (2,3) now agrees
        assert_relative_eq!(delta, local, max_relative = 1e-9);
    }
}
