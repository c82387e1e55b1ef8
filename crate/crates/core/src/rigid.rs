//! Rigid 3D transforms and the closed-form weighted rigid fit that powers
//! the M-step, plus per-vertex local transform estimation and the k-means
//! clustering used by the transform-clustering initializer.

use crate::error::{Error, Result};
use crate::mesh::RegisteredSet;
use nalgebra::{Matrix3, Matrix4, Point3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Rotation (unit quaternion, canonical sign) followed by a translation.
///
/// The canonical sign convention is `w >= 0`, and if `w == 0` the first
/// nonzero vector component is nonnegative, so equal rotations compare
/// equal componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// From raw quaternion components `(w, x, y, z)`; the quaternion is
    /// normalized and sign-canonicalized.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        Self::new(
            UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
            translation,
        )
    }

    /// Rotation by `axis * angle` about the origin, then translation.
    pub fn from_rotation_vector(rv: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(rv), translation)
    }

    /// Rotation by `angle` about an axis line through `pivot`.
    pub fn about_pivot(axis: Vector3<f64>, angle: f64, pivot: Point3<f64>) -> Self {
        let rot = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        let translation = pivot.coords - rot * pivot.coords;
        Self::new(rot, translation)
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Quaternion components in `(w, x, y, z)` order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Rotation vector (axis * angle); the canonical sign keeps the angle
    /// in `[0, pi]`.
    pub fn rotation_vector(&self) -> Vector3<f64> {
        self.rotation.scaled_axis()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.to_rotation_matrix().into_inner());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let raw = q.quaternion();
    let comps = [raw.w, raw.i, raw.j, raw.k];
    let first = comps.iter().find(|c| **c != 0.0).copied().unwrap_or(1.0);
    if first < 0.0 {
        UnitQuaternion::new_unchecked(-*raw)
    } else {
        q
    }
}

/// Euclidean embedding of a rigid transform: rotation vector followed by
/// the translation. Free of double-cover ambiguity for angles below pi.
pub fn transform_feature(t: &RigidTransform) -> [f64; 6] {
    let rv = t.rotation_vector();
    let tr = t.translation();
    [rv.x, rv.y, rv.z, tr.x, tr.y, tr.z]
}

/// Weighted least-squares rigid alignment of `src` onto `dst`, using the
/// closed-form quaternion method: the optimal rotation is the eigenvector
/// for the largest eigenvalue of the 4x4 symmetric matrix assembled from
/// the weighted cross-covariance of the centered point sets, and the
/// translation follows from the weighted centroids.
///
/// Returns the transform and the attained objective
/// `sum_i w_i * ||dst_i - T(src_i)||^2`.
///
/// Fewer than 3 strictly positive weights, or a (nearly) collinear source
/// configuration, cannot pin down a rotation; those cases return
/// [`Error::DegenerateFit`] carrying the centroid-translation fallback.
pub fn fit_rigid(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    weights: &[f64],
) -> Result<(RigidTransform, f64)> {
    assert_eq!(src.len(), dst.len());
    assert_eq!(src.len(), weights.len());
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Parameter("negative weight in fit_rigid".into()));
    }
    let wsum: f64 = weights.iter().sum();
    let effective = weights.iter().filter(|w| **w > 0.0).count();

    let degenerate = |detail: String| {
        let (fallback, residual) = centroid_fallback(src, dst, weights, wsum);
        Err(Error::DegenerateFit {
            detail,
            fallback,
            residual,
        })
    };

    if effective < 3 || wsum <= 0.0 {
        return degenerate(format!("{effective} effective points, need at least 3"));
    }

    let (mu_src, mu_dst) = weighted_centroids(src, dst, weights, wsum);

    // Weighted scatter of the centered source detects rank deficiency.
    let mut scatter = Matrix3::<f64>::zeros();
    let mut cross = Matrix3::<f64>::zeros();
    for ((a, b), &w) in src.iter().zip(dst).zip(weights) {
        let ac = a - mu_src;
        let bc = b - mu_dst;
        scatter += w * ac * ac.transpose();
        cross += w * ac * bc.transpose();
    }
    let mut eigs: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if eigs[0] <= 0.0 || eigs[1] <= 1e-9 * eigs[0] {
        return degenerate("source points are coincident or collinear".into());
    }

    let rotation = rotation_from_cross_covariance(&cross);
    let translation = mu_dst.coords - rotation * mu_src.coords;
    let t = RigidTransform::new(rotation, translation);
    let residual = src
        .iter()
        .zip(dst)
        .zip(weights)
        .map(|((a, b), &w)| w * (b - t.apply(a)).norm_squared())
        .sum();
    Ok((t, residual))
}

fn weighted_centroids(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    weights: &[f64],
    wsum: f64,
) -> (Point3<f64>, Point3<f64>) {
    let mut mu_src = Vector3::zeros();
    let mut mu_dst = Vector3::zeros();
    for ((a, b), &w) in src.iter().zip(dst).zip(weights) {
        mu_src += w * a.coords;
        mu_dst += w * b.coords;
    }
    (Point3::from(mu_src / wsum), Point3::from(mu_dst / wsum))
}

fn centroid_fallback(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    weights: &[f64],
    wsum: f64,
) -> (RigidTransform, f64) {
    let t = if wsum > 0.0 {
        let (mu_src, mu_dst) = weighted_centroids(src, dst, weights, wsum);
        RigidTransform::new(UnitQuaternion::identity(), mu_dst - mu_src)
    } else {
        RigidTransform::identity()
    };
    let residual = src
        .iter()
        .zip(dst)
        .zip(weights)
        .map(|((a, b), &w)| w * (b - t.apply(a)).norm_squared())
        .sum();
    (t, residual)
}

/// Largest-eigenvalue eigenvector of the 4x4 quaternion matrix built from
/// the cross-covariance `S = sum_i w_i src_c dst_c^T`.
fn rotation_from_cross_covariance(s: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = nalgebra::SymmetricEigen::new(n);
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let q = eig.eigenvectors.column(best);
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// Rigid transform of the hop-neighborhood of `vertex` in the template
/// against the index-corresponded points of instance `instance_index`,
/// with unit weights.
pub fn local_transform(
    set: &RegisteredSet,
    instance_index: usize,
    vertex_index: usize,
    hop_radius: usize,
) -> Result<RigidTransform> {
    let hood = set.template().hop_neighborhood(vertex_index, hop_radius);
    let src: Vec<Point3<f64>> = hood.iter().map(|&v| set.template().points()[v]).collect();
    let dst: Vec<Point3<f64>> = hood
        .iter()
        .map(|&v| set.instance(instance_index)[v])
        .collect();
    let weights = vec![1.0; src.len()];
    fit_rigid(&src, &dst, &weights).map(|(t, _)| t)
}

/// Lloyd's k-means with k-means++ seeding, run to convergence or 100
/// iterations. Assignment ties go to the lower cluster index; an empty
/// cluster is reseeded on the point farthest from its current center.
pub fn cluster_features(features: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = features.len();
    if k < 1 || k > n {
        return Err(Error::Parameter(format!("k = {k} outside [1, {n}]")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Parameter("inconsistent feature dimensions".into()));
    }
    let dist2 =
        |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(features[rng.gen_range(0..n)].clone());
    while centers.len() < k {
        let d: Vec<f64> = features
            .iter()
            .map(|f| {
                centers
                    .iter()
                    .map(|c| dist2(f, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &di) in d.iter().enumerate() {
                r -= di;
                if r <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.push(features[idx].clone());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let prev = labels.clone();
        for (i, f) in features.iter().enumerate() {
            let mut best = 0;
            let mut best_d = dist2(f, &centers[0]);
            for (c, center) in centers.iter().enumerate().skip(1) {
                let d = dist2(f, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            labels[i] = best;
        }
        // Reseed empty clusters from the farthest point.
        for c in 0..k {
            if labels.contains(&c) {
                continue;
            }
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = dist2(&features[a], &centers[labels[a]]);
                    let db = dist2(&features[b], &centers[labels[b]]);
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            labels[far] = c;
            centers[c] = features[far].clone();
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for &i in &members {
                for (m, x) in mean.iter_mut().zip(&features[i]) {
                    *m += x;
                }
            }
            for m in &mut mean {
                *m /= members.len() as f64;
            }
            *center = mean;
        }
        if labels == prev {
            break;
        }
    }
    Ok(labels)
}
