//! Ground-truth synthetic articulated meshes: tessellated capsule chains
//! (or stars) posed by hinge rotations, with optional Gaussian noise.
//! The generator is the oracle source for the end-to-end tests.

use crate::error::{Error, Result};
use crate::labeling::{PartLabeling, TransformSet};
use crate::mesh::{Mesh, RegisteredSet};
use crate::rigid::RigidTransform;
use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// Segments joined end to end; joint p sits between parts p-1 and p.
    Chain,
    /// A central segment with all other segments hinged at its far end.
    Star,
}

/// Specification of a synthetic articulated body.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub part_count: usize,
    pub topology: Topology,
    pub segment_length: f64,
    pub radius: f64,
    /// Approximate tessellation density; ring size and ring count are
    /// chosen for near-isotropic edge lengths.
    pub verts_per_segment: usize,
    /// One hinge axis per joint (part_count - 1 entries).
    pub axes: Vec<Vector3<f64>>,
    /// Per-pose joint angles: N rows of part_count - 1 radians each.
    pub poses: Vec<Vec<f64>>,
    /// Standard deviation of per-coordinate Gaussian noise, in length
    /// units. Zero means exact rigid instances.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// A chain with unit segments, radius 0.1 and all hinge axes along z.
    pub fn chain(
        part_count: usize,
        verts_per_segment: usize,
        poses: Vec<Vec<f64>>,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let joints = part_count.saturating_sub(1);
        Self {
            part_count,
            topology: Topology::Chain,
            segment_length: 1.0,
            radius: 0.1,
            verts_per_segment,
            axes: vec![Vector3::z(); joints],
            poses,
            noise_sigma,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.part_count == 0 {
            return Err(Error::Parameter("part_count must be >= 1".into()));
        }
        if self.topology == Topology::Star && self.part_count < 2 {
            return Err(Error::Parameter("a star needs >= 2 parts".into()));
        }
        if self.segment_length.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
            || self.radius.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        {
            return Err(Error::Parameter(
                "segment_length and radius must be positive".into(),
            ));
        }
        if self.verts_per_segment < 12 {
            return Err(Error::Parameter(
                "tessellation must yield >= 12 vertices per segment".into(),
            ));
        }
        let joints = self.part_count - 1;
        if self.axes.len() != joints {
            return Err(Error::Parameter(format!(
                "expected {joints} hinge axes, got {}",
                self.axes.len()
            )));
        }
        if self.axes.iter().any(|a| a.norm() < 1e-12) {
            return Err(Error::Parameter("zero-length hinge axis".into()));
        }
        if self.poses.is_empty() {
            return Err(Error::Parameter("need at least one pose".into()));
        }
        for (i, pose) in self.poses.iter().enumerate() {
            if pose.len() != joints {
                return Err(Error::Parameter(format!(
                    "pose {i} has {} angles, expected {joints}",
                    pose.len()
                )));
            }
            if pose
                .iter()
                .any(|&a| !(a > -std::f64::consts::PI && a < std::f64::consts::PI))
            {
                return Err(Error::Parameter(format!(
                    "pose {i} has an angle outside (-pi, pi)"
                )));
            }
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Parameter("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything the generator knows that a fit must rediscover.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub labeling: PartLabeling,
    pub transforms: TransformSet,
    /// (part p, part q, joint position in template coordinates).
    pub joints: Vec<(usize, usize, Point3<f64>)>,
    /// Per joint, the vertices within one ring of a cross-part edge.
    /// Evaluation excludes these; the generator's proximal-side boundary
    /// convention is arbitrary there.
    pub boundary_bands: Vec<Vec<usize>>,
}

impl GroundTruth {
    /// Union of all per-joint bands, sorted.
    pub fn band_union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.boundary_bands.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

struct TemplateBuild {
    points: Vec<Point3<f64>>,
    triangles: Vec<[usize; 3]>,
    labels: Vec<usize>,
}

/// Ring size m and rings-per-segment g targeting `n` vertices with
/// circumferential spacing 2 pi r / m close to axial spacing L / g.
fn tessellation(n: usize, length: f64, radius: f64) -> (usize, usize) {
    let m = ((n as f64 * 2.0 * std::f64::consts::PI * radius / length).sqrt()).round() as usize;
    let m = m.clamp(6, n / 2);
    let g = (n as f64 / m as f64).round().max(2.0) as usize;
    (m, g)
}

fn ring(
    center: Point3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    radius: f64,
    m: usize,
) -> Vec<Point3<f64>> {
    (0..m)
        .map(|t| {
            let a = 2.0 * std::f64::consts::PI * t as f64 / m as f64;
            center + radius * (a.cos() * e1 + a.sin() * e2)
        })
        .collect()
}

/// Two triangles per quad between consecutive rings of equal size.
fn bridge_rings(tris: &mut Vec<[usize; 3]>, lower: &[usize], upper: &[usize]) {
    let m = lower.len();
    for t in 0..m {
        let u = (t + 1) % m;
        tris.push([lower[t], lower[u], upper[t]]);
        tris.push([lower[u], upper[u], upper[t]]);
    }
}

fn fan(tris: &mut Vec<[usize; 3]>, apex: usize, ring: &[usize], outward: bool) {
    let m = ring.len();
    for t in 0..m {
        let u = (t + 1) % m;
        if outward {
            tris.push([apex, ring[t], ring[u]]);
        } else {
            tris.push([apex, ring[u], ring[t]]);
        }
    }
}

fn build_chain_template(spec: &SynthSpec) -> TemplateBuild {
    let k = spec.part_count;
    let l = spec.segment_length;
    let (m, g) = tessellation(spec.verts_per_segment, l, spec.radius);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut tris = Vec::new();

    points.push(Point3::new(-spec.radius, 0.0, 0.0));
    labels.push(0);

    let mut rings: Vec<Vec<usize>> = Vec::new();
    for ring_idx in 0..=k * g {
        let x = ring_idx as f64 * l / g as f64;
        // The ring exactly at a joint pivot belongs to the proximal part.
        let part = if ring_idx == 0 { 0 } else { (ring_idx - 1) / g };
        let base = points.len();
        points.extend(ring(
            Point3::new(x, 0.0, 0.0),
            Vector3::y(),
            Vector3::z(),
            spec.radius,
            m,
        ));
        labels.extend(std::iter::repeat_n(part, m));
        rings.push((base..base + m).collect());
    }
    let end_apex = points.len();
    points.push(Point3::new(k as f64 * l + spec.radius, 0.0, 0.0));
    labels.push(k - 1);

    fan(&mut tris, 0, &rings[0], false);
    for w in rings.windows(2) {
        bridge_rings(&mut tris, &w[0], &w[1]);
    }
    fan(&mut tris, end_apex, rings.last().unwrap(), true);

    TemplateBuild {
        points,
        triangles: tris,
        labels,
    }
}

fn build_star_template(spec: &SynthSpec) -> TemplateBuild {
    let k = spec.part_count;
    let l = spec.segment_length;
    let (m, g) = tessellation(spec.verts_per_segment, l, spec.radius);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut tris = Vec::new();

    // Central segment along +x, capped at the origin end.
    points.push(Point3::new(-spec.radius, 0.0, 0.0));
    labels.push(0);
    let mut central: Vec<Vec<usize>> = Vec::new();
    for ring_idx in 0..=g {
        let base = points.len();
        points.extend(ring(
            Point3::new(ring_idx as f64 * l / g as f64, 0.0, 0.0),
            Vector3::y(),
            Vector3::z(),
            spec.radius,
            m,
        ));
        labels.extend(std::iter::repeat_n(0, m));
        central.push((base..base + m).collect());
    }
    fan(&mut tris, 0, &central[0], false);
    for w in central.windows(2) {
        bridge_rings(&mut tris, &w[0], &w[1]);
    }
    let hub_ring = central.last().unwrap().clone();

    // Arms radiate from the pivot; they may interpenetrate near the hub,
    // which the algorithms never look at. Each arm bridges off the hub
    // ring so the mesh stays connected.
    let pivot = Point3::new(l, 0.0, 0.0);
    for arm in 1..k {
        let phi = 2.0 * std::f64::consts::PI * (arm - 1) as f64 / (k - 1) as f64;
        let d = Vector3::new(phi.cos(), phi.sin(), 0.0);
        let e1 = Vector3::new(-phi.sin(), phi.cos(), 0.0);
        let e2 = Vector3::z();
        let mut prev = hub_ring.clone();
        for ring_idx in 1..=g {
            let base = points.len();
            points.extend(ring(
                pivot + ring_idx as f64 * l / g as f64 * d,
                e1,
                e2,
                spec.radius,
                m,
            ));
            labels.extend(std::iter::repeat_n(arm, m));
            let cur: Vec<usize> = (base..base + m).collect();
            bridge_rings(&mut tris, &prev, &cur);
            prev = cur;
        }
        let apex = points.len();
        points.push(pivot + (l + spec.radius) * d);
        labels.push(arm);
        fan(&mut tris, apex, &prev, true);
    }

    TemplateBuild {
        points,
        triangles: tris,
        labels,
    }
}

fn pose_transforms(spec: &SynthSpec, pose: &[f64]) -> Vec<RigidTransform> {
    let l = spec.segment_length;
    let mut out = vec![RigidTransform::identity()];
    for p in 1..spec.part_count {
        let axis = spec.axes[p - 1];
        match spec.topology {
            Topology::Chain => {
                let pivot = Point3::new(p as f64 * l, 0.0, 0.0);
                let hinge = RigidTransform::about_pivot(axis, pose[p - 1], pivot);
                out.push(out[p - 1].compose(&hinge));
            }
            Topology::Star => {
                let pivot = Point3::new(l, 0.0, 0.0);
                out.push(RigidTransform::about_pivot(axis, pose[p - 1], pivot));
            }
        }
    }
    out
}

/// Band of vertices within one ring of a cross edge between parts p, q.
fn boundary_band(mesh: &Mesh, labels: &[usize], p: usize, q: usize) -> Vec<usize> {
    let mut band = Vec::new();
    for &(a, b) in mesh.edges() {
        let (la, lb) = (labels[a], labels[b]);
        if (la, lb) == (p, q) || (la, lb) == (q, p) {
            band.push(a);
            band.push(b);
        }
    }
    let seeds = {
        let mut s = band.clone();
        s.sort_unstable();
        s.dedup();
        s
    };
    for &v in &seeds {
        band.extend_from_slice(mesh.neighbors(v));
    }
    band.sort_unstable();
    band.dedup();
    band
}

/// Generates the registered set and its ground truth. Instance points are
/// exact rigid images of the template before noise.
pub fn generate(spec: &SynthSpec) -> Result<(RegisteredSet, GroundTruth)> {
    spec.validate()?;
    let built = match spec.topology {
        Topology::Chain => build_chain_template(spec),
        Topology::Star => build_star_template(spec),
    };
    let mesh = Mesh::new(built.points, built.triangles)?;
    let labels = built.labels;

    let mut grid = Vec::with_capacity(spec.poses.len());
    let mut instances = Vec::with_capacity(spec.poses.len());
    for pose in &spec.poses {
        let transforms = pose_transforms(spec, pose);
        instances.push(
            mesh.points()
                .iter()
                .zip(&labels)
                .map(|(x, &l)| transforms[l].apply(x))
                .collect::<Vec<_>>(),
        );
        grid.push(transforms);
    }

    let joints: Vec<(usize, usize, Point3<f64>)> = (1..spec.part_count)
        .map(|p| match spec.topology {
            Topology::Chain => (
                p - 1,
                p,
                Point3::new(p as f64 * spec.segment_length, 0.0, 0.0),
            ),
            Topology::Star => (0, p, Point3::new(spec.segment_length, 0.0, 0.0)),
        })
        .collect();
    let boundary_bands = joints
        .iter()
        .map(|&(p, q, _)| boundary_band(&mesh, &labels, p, q))
        .collect();

    let part_count = spec.part_count;
    let truth = GroundTruth {
        labeling: PartLabeling::new(labels, part_count)?,
        transforms: TransformSet::new(grid)?,
        joints,
        boundary_bands,
    };
    let set = RegisteredSet::new(mesh, instances)?;
    let set = if spec.noise_sigma > 0.0 {
        add_noise(&set, spec.noise_sigma, spec.seed)?
    } else {
        set
    };
    Ok((set, truth))
}

/// Adds independent zero-mean Gaussian offsets (std `noise_sigma` per
/// coordinate) to every instance point. The template is untouched.
pub fn add_noise(set: &RegisteredSet, noise_sigma: f64, seed: u64) -> Result<RegisteredSet> {
    if noise_sigma.is_nan() || noise_sigma < 0.0 {
        return Err(Error::Parameter("noise_sigma must be >= 0".into()));
    }
    if noise_sigma == 0.0 {
        return Ok(set.clone());
    }
    let normal = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::Parameter(format!("bad noise distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = set
        .instances()
        .iter()
        .map(|inst| {
            inst.iter()
                .map(|p| {
                    Point3::new(
                        p.x + normal.sample(&mut rng),
                        p.y + normal.sample(&mut rng),
                        p.z + normal.sample(&mut rng),
                    )
                })
                .collect()
        })
        .collect();
    RegisteredSet::new(set.template().clone(), instances)
}
