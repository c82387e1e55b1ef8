//! Triangle mesh representation and the graph utilities built on it:
//! undirected edge extraction, connected components, resolution
//! measurement and the farthest-point patch subdivision used to seed EM.

use crate::error::{Error, Result};
use crate::labeling::PartLabeling;
use nalgebra::Point3;
use std::collections::BTreeSet;

/// Immutable triangle mesh. Edges and vertex adjacency are derived once at
/// construction; all queries are pure.
#[derive(Debug, Clone)]
pub struct Mesh {
    points: Vec<Point3<f64>>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

/// The algorithm's sole input: a template mesh plus N instance point
/// arrays corresponded to the template vertices by index.
#[derive(Debug, Clone)]
pub struct RegisteredSet {
    template: Mesh,
    instances: Vec<Vec<Point3<f64>>>,
}

impl RegisteredSet {
    pub fn new(template: Mesh, instances: Vec<Vec<Point3<f64>>>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Correspondence("need at least one instance".into()));
        }
        let j = template.vertex_count();
        for (i, inst) in instances.iter().enumerate() {
            if inst.len() != j {
                return Err(Error::Correspondence(format!(
                    "instance {i} has {} points, template has {j}",
                    inst.len()
                )));
            }
        }
        Ok(Self {
            template,
            instances,
        })
    }

    pub fn template(&self) -> &Mesh {
        &self.template
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    pub fn instance(&self, i: usize) -> &[Point3<f64>] {
        &self.instances[i]
    }

    pub fn instances(&self) -> &[Vec<Point3<f64>>] {
        &self.instances
    }
}

/// Extracts the undirected edge set of a triangle list. Each unordered
/// adjacent pair appears exactly once, as `(j, k)` with `j < k`, in
/// lexicographic order.
pub fn build_edges(triangles: &[[usize; 3]], vertex_count: usize) -> Result<Vec<(usize, usize)>> {
    let mut set = BTreeSet::new();
    for (t, tri) in triangles.iter().enumerate() {
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            return Err(Error::Structural(format!(
                "triangle {t} has a repeated vertex index: {tri:?}"
            )));
        }
        for &(a, b) in &[(tri[0], tri[1]), (tri[1], tri[2]), (tri[0], tri[2])] {
            if a >= vertex_count || b >= vertex_count {
                return Err(Error::Structural(format!(
                    "triangle {t} references vertex out of range (vertex count {vertex_count}): {tri:?}"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
    }
    Ok(set.into_iter().collect())
}

impl Mesh {
    pub fn new(points: Vec<Point3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let edges = build_edges(&triangles, points.len())?;
        let neighbors = adjacency(points.len(), &edges);
        Ok(Self {
            points,
            triangles,
            edges,
            neighbors,
        })
    }

    /// Builds a mesh from an explicit undirected edge graph with no faces.
    /// The labeling machinery only ever looks at points and edges, so this
    /// is the natural way to feed it path or ring graphs.
    pub fn from_edge_list(points: Vec<Point3<f64>>, edges: Vec<(usize, usize)>) -> Self {
        let mut edges: Vec<(usize, usize)> = edges
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let neighbors = adjacency(points.len(), &edges);
        Self {
            points,
            triangles: Vec::new(),
            edges,
            neighbors,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Undirected edges, `(j, k)` with `j < k`, lexicographically sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted vertex adjacency.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    /// Vertices reachable from `v` in at most `hops` edge steps,
    /// including `v` itself, in ascending order.
    pub fn hop_neighborhood(&self, v: usize, hops: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.points.len()];
        dist[v] = 0;
        let mut queue = std::collections::VecDeque::from([v]);
        let mut out = vec![v];
        while let Some(u) = queue.pop_front() {
            if dist[u] == hops {
                continue;
            }
            for &w in &self.neighbors[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    out.push(w);
                    queue.push_back(w);
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Partitions `subset` into edge-connected components. Two vertices
    /// share a component iff they are connected through edges whose both
    /// endpoints lie in the subset. Components are ordered by their
    /// smallest contained index; vertices within a component are sorted.
    pub fn connected_components(&self, subset: &[usize]) -> Vec<Vec<usize>> {
        let mut in_subset = vec![false; self.points.len()];
        for &v in subset {
            in_subset[v] = true;
        }
        let mut seen = vec![false; self.points.len()];
        let mut sorted: Vec<usize> = subset.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut components = Vec::new();
        for &start in &sorted {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &w in &self.neighbors[u] {
                    if in_subset[w] && !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }
        components
    }

    /// Mesh resolution, defined as the lower median of all edge lengths.
    pub fn resolution(&self) -> Result<f64> {
        if self.edges.is_empty() {
            return Err(Error::Structural("mesh has no edges".into()));
        }
        let mut lengths: Vec<f64> = self
            .edges
            .iter()
            .map(|&(j, k)| (self.points[j] - self.points[k]).norm())
            .collect();
        lengths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(lengths[(lengths.len() - 1) / 2])
    }

    /// Hop distances from every vertex in `sources` (multi-source BFS),
    /// `usize::MAX` where unreachable.
    fn hop_distances(&self, sources: &[usize]) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.points.len()];
        let mut queue = std::collections::VecDeque::new();
        for &s in sources {
            dist[s] = 0;
            queue.push_back(s);
        }
        while let Some(u) = queue.pop_front() {
            for &w in &self.neighbors[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }
}

/// Splits the mesh into `patch_count` edge-connected patches of roughly
/// equal vertex count: seed vertices are picked by farthest-point sampling
/// under graph hop distance, then every vertex joins its nearest seed
/// (ties go to the seed with the lower vertex index).
///
/// On a disconnected mesh the patch budget is spread over the components
/// proportionally to their vertex counts. The first seed of each component
/// is a pseudo-random pick derived from `seed`.
pub fn subdivide_patches(mesh: &Mesh, patch_count: usize, seed: u64) -> Result<PartLabeling> {
    let j = mesh.vertex_count();
    if patch_count < 1 || patch_count > j {
        return Err(Error::Parameter(format!(
            "patch_count {patch_count} outside [1, {j}]"
        )));
    }
    let all: Vec<usize> = (0..j).collect();
    let components = mesh.connected_components(&all);
    if patch_count < components.len() {
        return Err(Error::Parameter(format!(
            "patch_count {patch_count} below component count {}",
            components.len()
        )));
    }

    // Largest-remainder apportionment of patches over components.
    let mut counts = vec![1usize; components.len()];
    let mut rest = patch_count - components.len();
    while rest > 0 {
        // Component with the highest vertex-per-patch load gets the next one.
        let best = (0..components.len())
            .max_by(|&a, &b| {
                let la = components[a].len() as f64 / counts[a] as f64;
                let lb = components[b].len() as f64 / counts[b] as f64;
                la.partial_cmp(&lb).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        counts[best] += 1;
        rest -= 1;
    }

    let mut labels = vec![0usize; j];
    let mut next_label = 0usize;
    let mut mix = seed;
    for (comp, &want) in components.iter().zip(&counts) {
        // splitmix64 step; one draw per component.
        mix = mix.wrapping_add(0x9e3779b97f4a7c15);
        let mut h = mix;
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
        h ^= h >> 31;
        let want = want.min(comp.len());

        let mut seeds = vec![comp[(h as usize) % comp.len()]];
        while seeds.len() < want {
            let dist = mesh.hop_distances(&seeds);
            let far = comp
                .iter()
                .copied()
                .max_by(|&a, &b| dist[a].cmp(&dist[b]).then(b.cmp(&a)))
                .unwrap();
            seeds.push(far);
        }

        // Nearest-seed assignment; per-seed BFS keeps the tie-break exact.
        let per_seed: Vec<Vec<usize>> = seeds.iter().map(|&s| mesh.hop_distances(&[s])).collect();
        let mut order: Vec<usize> = (0..seeds.len()).collect();
        order.sort_by_key(|&i| seeds[i]);
        for &v in comp {
            let mut best = order[0];
            for &i in &order {
                if per_seed[i][v] < per_seed[best][v] {
                    best = i;
                }
            }
            labels[v] = next_label + best;
        }
        next_label += seeds.len();
    }
    PartLabeling::compacted(labels)
}

fn adjacency(vertex_count: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut neighbors = vec![Vec::new(); vertex_count];
    for &(j, k) in edges {
        neighbors[j].push(k);
        neighbors[k].push(j);
    }
    for n in &mut neighbors {
        n.sort_unstable();
    }
    neighbors
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;

    fn path_graph_mesh(n: usize) -> Mesh {
        Mesh::from_edge_list(
            (0..n).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect(),
            (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
        )
    }

    #[test]
    fn edges_single_triangle() {
        let e = build_edges(&[[0, 1, 2]], 3).unwrap();
        assert_eq!(e, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn edges_shared_pair_deduplicated() {
        let e = build_edges(&[[0, 1, 2], [1, 2, 3]], 4).unwrap();
        assert_eq!(e.len(), 5);
        assert!(e.contains(&(1, 2)));
    }

    #[test]
    fn edges_tetrahedron_all_pairs() {
        // Hand enumeration: every vertex pair of a tetrahedron is an edge.
        let tris = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
        let e = build_edges(&tris, 4).unwrap();
        assert_eq!(e, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn edges_order_insensitive() {
        let tris = vec![[0usize, 1, 2], [1, 2, 3], [2, 3, 4], [0, 2, 4]];
        let mut permuted = tris.clone();
        permuted.reverse();
        assert_eq!(
            build_edges(&tris, 5).unwrap(),
            build_edges(&permuted, 5).unwrap()
        );
    }

    #[test]
    fn edges_reject_degenerate() {
        assert!(build_edges(&[[0, 0, 1]], 2).is_err());
        assert!(build_edges(&[[0, 1, 7]], 3).is_err());
    }

    #[test]
    fn components_connected_mesh() {
        let m = tetrahedron();
        let comps = m.connected_components(&[0, 1, 2, 3]);
        assert_eq!(comps, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn components_two_disjoint_triangles() {
        let pts = (0..6)
            .map(|i| Point3::new(i as f64, 0.0, (i % 2) as f64))
            .collect();
        let m = Mesh::new(pts, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        let comps = m.connected_components(&(0..6).collect::<Vec<_>>());
        assert_eq!(comps, vec![vec![0, 1, 2], vec![3, 4, 5]]);
    }

    #[test]
    fn components_subset_splits_path() {
        // Hand BFS on path 0-1-2-3-4 restricted to {0,1,3,4}.
        let m = path_graph_mesh(5);
        let comps = m.connected_components(&[0, 1, 3, 4]);
        assert_eq!(comps, vec![vec![0, 1], vec![3, 4]]);
    }

    #[test]
    fn components_empty_subset() {
        let m = tetrahedron();
        assert!(m.connected_components(&[]).is_empty());
    }

    fn tetrahedron() -> Mesh {
        Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.5, 1.0, 0.0),
                Point3::new(0.5, 0.5, 1.0),
            ],
            vec![[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn resolution_unit_triangle() {
        let m = Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.5, 3f64.sqrt() / 2.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!((m.resolution().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolution_odd_median() {
        let m = Mesh::from_edge_list(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(3.0, 0.0, 0.0),
                Point3::new(6.0, 0.0, 0.0),
            ],
            vec![(0, 1), (1, 2), (2, 3)],
        );
        assert_eq!(m.resolution().unwrap(), 2.0);
    }

    #[test]
    fn resolution_unit_cube_lower_median() {
        // 18 edges: 12 of length 1, 6 face diagonals of length sqrt(2);
        // the lower median is 1.0.
        let pts: Vec<Point3<f64>> = (0..8)
            .map(|i| Point3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let tris = vec![
            [0, 1, 2],
            [1, 3, 2], // z = 0
            [4, 6, 5],
            [5, 6, 7], // z = 1
            [0, 4, 1],
            [1, 4, 5], // y = 0
            [2, 3, 6],
            [3, 7, 6], // y = 1
            [0, 2, 4],
            [2, 6, 4], // x = 0
            [1, 5, 3],
            [3, 5, 7], // x = 1
        ];
        let m = Mesh::new(pts, tris).unwrap();
        assert_eq!(m.edges().len(), 18);
        assert!((m.resolution().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolution_rigid_invariant() {
        let m = tetrahedron();
        let r0 = m.resolution().unwrap();
        let iso = nalgebra::Isometry3::new(
            nalgebra::Vector3::new(4.0, -2.0, 9.0),
            nalgebra::Vector3::new(0.3, 1.1, -0.7),
        );
        let moved = Mesh::new(
            m.points().iter().map(|p| iso * p).collect(),
            m.triangles().to_vec(),
        )
        .unwrap();
        assert!((moved.resolution().unwrap() - r0).abs() <= 1e-9 * r0);
    }

    #[test]
    fn patches_single_patch() {
        let m = tetrahedron();
        let l = subdivide_patches(&m, 1, 3).unwrap();
        assert_eq!(l.part_count(), 1);
        assert!(l.labels().iter().all(|&p| p == 0));
    }

    #[test]
    fn patches_one_per_vertex() {
        let m = tetrahedron();
        let l = subdivide_patches(&m, 4, 11).unwrap();
        assert_eq!(l.part_count(), 4);
        let mut seen = l.labels().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn patches_path_hand_case() {
        // Path 0-1-2-3, two patches, seed 0 puts the first FPS seed on
        // vertex 0; the farthest vertex is 3. Vertex 1 is closer to seed 0,
        // vertex 2 closer to seed 3.
        let m = path_graph_mesh(4);
        let l = subdivide_patches(&m, 2, 0).unwrap();
        assert_eq!(l.labels(), &[0, 0, 1, 1]);
    }

    #[test]
    fn patches_connected_and_deterministic() {
        let m = path_graph_mesh(30);
        for seed in [0u64, 1, 42] {
            let a = subdivide_patches(&m, 5, seed).unwrap();
            let b = subdivide_patches(&m, 5, seed).unwrap();
            assert_eq!(a.labels(), b.labels());
            for p in 0..a.part_count() {
                let verts = a.part_vertices(p);
                assert_eq!(m.connected_components(&verts).len(), 1);
            }
        }
    }

    #[test]
    fn patches_bad_count() {
        let m = tetrahedron();
        assert!(subdivide_patches(&m, 0, 0).is_err());
        assert!(subdivide_patches(&m, 5, 0).is_err());
    }
}

