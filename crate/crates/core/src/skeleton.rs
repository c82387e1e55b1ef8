//! Joint estimation between adjacent parts and assembly of the final
//! articulated model. A joint position is the point that moves most
//! consistently under both parts' transforms across all instances,
//! optionally pulled toward the observed part-boundary centroids.

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labeling::{PartLabeling, TransformSet};
use crate::mesh::{Mesh, RegisteredSet};

/// Minimum cross-edge count for two parts to count as adjacent.
const MIN_BOUNDARY_EDGES: usize = 1;
/// Eigenvalue ratio below which the articulation term is rank-deficient.
const RANK_THRESHOLD: f64 = 1e-8;

/// A joint between two adjacent parts, in template coordinates.
#[derive(Debug, Clone)]
pub struct Joint {
    /// Part pair, ordered so that `parts.0 < parts.1`.
    pub parts: (usize, usize),
    pub position: Point3<f64>,
    /// Objective value at the solution.
    pub residual: f64,
    /// True when the articulation constraints left one or more free
    /// directions (e.g. a pure hinge pins only the axis line).
    pub ambiguous: bool,
}

/// Converged segmentation, motions, and skeleton of a registered set.
#[derive(Debug, Clone)]
pub struct ArticulatedModel {
    pub labeling: PartLabeling,
    pub transforms: TransformSet,
    /// Adjacent part pairs with their cross-edge counts.
    pub adjacency: Vec<((usize, usize), usize)>,
    /// One joint per adjacent pair, in `adjacency` order.
    pub joints: Vec<Joint>,
}

/// Adjacent part pairs, each with the mesh edges crossing between them.
pub type PartAdjacency = Vec<((usize, usize), Vec<(usize, usize)>)>;

/// Lists adjacent part pairs with the mesh edges that cross between
/// them. Pairs are ordered, and listed in lexicographic order.
pub fn part_adjacency(labeling: &PartLabeling, mesh: &Mesh) -> Result<PartAdjacency> {
    if labeling.labels().len() != mesh.vertex_count() {
        return Err(Error::Structural(format!(
            "labeling covers {} vertices but mesh has {}",
            labeling.labels().len(),
            mesh.vertex_count()
        )));
    }
    let labels = labeling.labels();
    let mut cross: std::collections::BTreeMap<(usize, usize), Vec<(usize, usize)>> =
        std::collections::BTreeMap::new();
    for &(j, k) in mesh.edges() {
        let (a, b) = (labels[j], labels[k]);
        if a != b {
            let pair = (a.min(b), a.max(b));
            cross.entry(pair).or_default().push((j, k));
        }
    }
    Ok(cross
        .into_iter()
        .filter(|(_, edges)| edges.len() >= MIN_BOUNDARY_EDGES)
        .collect())
}

/// Per-instance boundary centroid: the mean over cross edges of the
/// midpoint of the two instance endpoint positions.
pub fn boundary_centroids(
    set: &RegisteredSet,
    cross_edges: &[(usize, usize)],
) -> Result<Vec<Point3<f64>>> {
    if cross_edges.is_empty() {
        return Err(Error::Structural(
            "no cross edges for boundary centroid".into(),
        ));
    }
    let inv = 1.0 / cross_edges.len() as f64;
    Ok((0..set.instance_count())
        .map(|i| {
            let z = set.instance(i);
            let mut acc = Vector3::zeros();
            for &(j, k) in cross_edges {
                acc += 0.5 * (z[j].coords + z[k].coords);
            }
            Point3::from(acc * inv)
        })
        .collect())
}

/// Evaluates the joint objective at `y`: articulation disagreement plus
/// `gamma` times the distance of the averaged image from each centroid.
pub fn joint_objective(
    p: usize,
    q: usize,
    ts: &TransformSet,
    centroids: &[Point3<f64>],
    gamma: f64,
    y: &Point3<f64>,
) -> f64 {
    let mut total = 0.0;
    for (i, centroid) in centroids.iter().enumerate() {
        let tp = ts.get(i, p).apply(y);
        let tq = ts.get(i, q).apply(y);
        total += (tp - tq).norm_squared();
        if gamma > 0.0 {
            let mid = Point3::from(0.5 * (tp.coords + tq.coords));
            total += gamma * (mid - centroid).norm_squared();
        }
    }
    total
}

/// Estimates the joint between parts `p` and `q` in closed form via the
/// 3x3 normal equations of the regression objective. With `gamma` = 0 a
/// rank-deficient system yields the minimum-norm solution shifted along
/// the free directions to pass nearest the mean centroid, flagged
/// ambiguous; a fully degenerate system is an error.
pub fn estimate_joint(
    p: usize,
    q: usize,
    ts: &TransformSet,
    centroids: &[Point3<f64>],
    gamma: f64,
) -> Result<Joint> {
    if p == q || p >= ts.part_count() || q >= ts.part_count() {
        return Err(Error::Parameter(format!(
            "invalid part pair ({p}, {q}) for {} parts",
            ts.part_count()
        )));
    }
    if centroids.len() != ts.instance_count() {
        return Err(Error::Structural(format!(
            "{} centroids for {} instances",
            centroids.len(),
            ts.instance_count()
        )));
    }
    if gamma < 0.0 {
        return Err(Error::Parameter(format!("gamma must be >= 0, got {gamma}")));
    }

    let mut h = Matrix3::<f64>::zeros();
    let mut g = Vector3::<f64>::zeros();
    for (i, centroid) in centroids.iter().enumerate() {
        let tp = ts.get(i, p);
        let tq = ts.get(i, q);
        let a = tp.rotation().to_rotation_matrix().into_inner()
            - tq.rotation().to_rotation_matrix().into_inner();
        let b = tq.translation() - tp.translation();
        h += a.transpose() * a;
        g += a.transpose() * b;
        if gamma > 0.0 {
            let mm = 0.5
                * (tp.rotation().to_rotation_matrix().into_inner()
                    + tq.rotation().to_rotation_matrix().into_inner());
            let d = centroid.coords - 0.5 * (tp.translation() + tq.translation());
            h += gamma * mm.transpose() * mm;
            g += gamma * mm.transpose() * d;
        }
    }

    let eig = h.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if max_ev < 1e-12 {
        return Err(Error::AmbiguousJoint(p.min(q), p.max(q)));
    }

    let cutoff = RANK_THRESHOLD * max_ev;
    let mut y = Vector3::zeros();
    let mut ambiguous = false;
    for k in 0..3 {
        let u = eig.eigenvectors.column(k);
        if eig.eigenvalues[k].abs() >= cutoff {
            y += u * (u.dot(&g) / eig.eigenvalues[k]);
        } else {
            ambiguous = true;
        }
    }
    if ambiguous {
        // Slide along the free directions to pass nearest the mean
        // centroid; the objective is constant along them.
        let mut mean = Vector3::zeros();
        for c in centroids {
            mean += c.coords;
        }
        mean /= centroids.len() as f64;
        for k in 0..3 {
            if eig.eigenvalues[k].abs() < cutoff {
                let u = eig.eigenvectors.column(k);
                y += u * u.dot(&(mean - y));
            }
        }
    }

    let position = Point3::from(y);
    let residual = joint_objective(p, q, ts, centroids, gamma, &position);
    Ok(Joint {
        parts: (p.min(q), p.max(q)),
        position,
        residual,
        ambiguous,
    })
}

/// Assembles the articulated model: adjacency, boundary centroids, and
/// one joint per adjacent pair. `gamma_factor` scales the centroid term
/// relative to the articulation term's trace, so the blend is
/// scale-free.
pub fn build_skeleton(
    set: &RegisteredSet,
    mesh: &Mesh,
    labeling: &PartLabeling,
    transforms: &TransformSet,
    gamma_factor: f64,
) -> Result<ArticulatedModel> {
    if gamma_factor < 0.0 {
        return Err(Error::Parameter(format!(
            "gamma factor must be >= 0, got {gamma_factor}"
        )));
    }
    let adjacency_edges = part_adjacency(labeling, mesh)?;
    let joints: Vec<Joint> = adjacency_edges
        .par_iter()
        .map(|&((p, q), ref edges)| {
            let centroids = boundary_centroids(set, edges)?;
            let mut trace = 0.0;
            for i in 0..transforms.instance_count() {
                let a = transforms
                    .get(i, p)
                    .rotation()
                    .to_rotation_matrix()
                    .into_inner()
                    - transforms
                        .get(i, q)
                        .rotation()
                        .to_rotation_matrix()
                        .into_inner();
                trace += (a.transpose() * a).trace();
            }
            estimate_joint(p, q, transforms, &centroids, gamma_factor * trace)
        })
        .collect::<Result<_>>()?;
    Ok(ArticulatedModel {
        labeling: labeling.clone(),
        transforms: transforms.clone(),
        adjacency: adjacency_edges
            .iter()
            .map(|&(pair, ref edges)| (pair, edges.len()))
            .collect(),
        joints,
    })
}
