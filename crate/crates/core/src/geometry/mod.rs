//! Mesh and point-set types, farthest point sampling and the evaluation
//! metrics (MSE, Chamfer distance, Earth Mover's Distance).

mod assignment;
mod metrics;
mod obj;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use assignment::min_cost_assignment;
pub use metrics::{chamfer, emd, mse, MetricRecord, EMD_MAX_POINTS};
pub use obj::{parse_obj, write_obj};

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub fn dist(a: Vec3, b: Vec3) -> f64 {
    dist2(a, b).sqrt()
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len().max(1) as f64;
    let s = points.iter().fold([0.0; 3], |acc, p| add(acc, *p));
    scale(s, 1.0 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Structural,
    Shear,
    Bend,
}

/// Connectivity shared by every state of one cloth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n_vertices: usize,
    edges: Vec<[usize; 2]>,
    edge_kinds: Vec<EdgeKind>,
    faces: Vec<[usize; 3]>,
}

impl Topology {
    /// Builds a topology, normalizing each edge to `(min, max)` order.
    ///
    /// Fails on out-of-range indices, self loops and duplicate undirected edges.
    pub fn new(
        n_vertices: usize,
        edges: Vec<[usize; 2]>,
        edge_kinds: Vec<EdgeKind>,
        faces: Vec<[usize; 3]>,
    ) -> Result<Self> {
        if edges.len() != edge_kinds.len() {
            return Err(Error::Domain(
                "edge kind count differs from edge count".into(),
            ));
        }
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        let mut normalized = Vec::with_capacity(edges.len());
        for &[a, b] in &edges {
            if a >= n_vertices || b >= n_vertices {
                return Err(Error::Domain(format!(
                    "edge ({a},{b}) out of range for {n_vertices} vertices"
                )));
            }
            if a == b {
                return Err(Error::Domain(format!("self-loop edge at vertex {a}")));
            }
            let e = [a.min(b), a.max(b)];
            if !seen.insert(e) {
                return Err(Error::Domain(format!("duplicate edge ({},{})", e[0], e[1])));
            }
            normalized.push(e);
        }
        for f in &faces {
            if f.iter().any(|&i| i >= n_vertices) {
                return Err(Error::Domain(format!(
                    "face {f:?} out of range for {n_vertices} vertices"
                )));
            }
        }
        Ok(Self {
            n_vertices,
            edges: normalized,
            edge_kinds,
            faces,
        })
    }

    /// Topology whose edges are the unique edges of the given triangles.
    pub fn from_faces(n_vertices: usize, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mut edges = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for f in &faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let e = [a.min(b), a.max(b)];
                if seen.insert(e) {
                    edges.push(e);
                }
            }
        }
        let kinds = vec![EdgeKind::Structural; edges.len()];
        Self::new(n_vertices, edges, kinds, faces)
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn edge_kinds(&self) -> &[EdgeKind] {
        &self.edge_kinds
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edge_kinds.iter().filter(|&&k| k == kind).count()
    }
}

/// A cloth state: vertex positions over a fixed connectivity.
#[derive(Debug, Clone)]
pub struct ClothMesh {
    vertices: Vec<Vec3>,
    topology: Arc<Topology>,
}

impl ClothMesh {
    pub fn new(vertices: Vec<Vec3>, topology: Arc<Topology>) -> Result<Self> {
        if vertices.len() != topology.n_vertices() {
            return Err(Error::Correspondence(format!(
                "{} vertices for a topology of {}",
                vertices.len(),
                topology.n_vertices()
            )));
        }
        Ok(Self { vertices, topology })
    }

    /// Same connectivity, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        Self::new(vertices, Arc::clone(&self.topology))
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertices_mut(&mut self) -> &mut [Vec3] {
        &mut self.vertices
    }

    pub fn into_vertices(self) -> Vec<Vec3> {
        self.vertices
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        self.topology.edges()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        self.topology.faces()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn same_connectivity(&self, other: &ClothMesh) -> bool {
        Arc::ptr_eq(&self.topology, &other.topology) || *self.topology == *other.topology
    }

    /// Same vertex count and triangles; ignores the spring edge set, which
    /// OBJ files do not carry.
    pub fn same_faces(&self, other: &ClothMesh) -> bool {
        self.n_vertices() == other.n_vertices() && self.faces() == other.faces()
    }

    /// Length of the bounding-box diagonal, used as a scene scale.
    pub fn diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for d in 0..3 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        dist(lo, hi)
    }
}

/// A partial observation of the cloth surface.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain(
                "point cloud must contain at least one point".into(),
            ));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Domain(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Farthest point sampling with a seeded random first index.
pub fn fps(points: &[Vec3], n: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Domain(
            "farthest point sampling on an empty set".into(),
        ));
    }
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len());
    fps_from(points, n, first)
}

/// Farthest point sampling starting at `first`. Ties go to the lowest index.
pub fn fps_from(points: &[Vec3], n: usize, first: usize) -> Result<Vec<usize>> {
    if n > points.len() {
        return Err(Error::Domain(format!(
            "cannot sample {n} points from a set of {}",
            points.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if first >= points.len() {
        return Err(Error::Domain(format!("start index {first} out of range")));
    }
    let mut selected = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = first;
    for _ in 0..n {
        selected.push(current);
        taken[current] = true;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Index of the nearest candidate to `p` (lowest index on ties).
pub fn nearest_index(p: Vec3, candidates: &[Vec3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let d = dist2(p, *c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_collinear_picks_far_end() {
        let pts: Vec<Vec3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(fps_from(&pts, 2, 0).unwrap(), vec![0, 9]);
    }

    #[test]
    fn fps_full_is_permutation() {
        let pts: Vec<Vec3> = (0..17)
            .map(|i| [(i * 7 % 5) as f64, i as f64 * 0.3, 0.0])
            .collect();
        let mut idx = fps(&pts, pts.len(), 3).unwrap();
        idx.sort();
        assert_eq!(idx, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_square_corners_before_center() {
        let pts = vec![
            [0.5, 0.5, 0.0],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        for start in 1..5 {
            let mut idx = fps_from(&pts, 4, start).unwrap();
            idx.sort();
            assert_eq!(idx, vec![1, 2, 3, 4], "start {start}");
        }
    }

    #[test]
    fn fps_rejects_oversampling() {
        let pts = vec![[0.0; 3]; 3];
        assert!(matches!(fps(&pts, 4, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn fps_is_seed_deterministic() {
        let pts: Vec<Vec3> = (0..50)
            .map(|i| [(i as f64).sin(), (i as f64 * 0.7).cos(), 0.1 * i as f64])
            .collect();
        assert_eq!(fps(&pts, 10, 42).unwrap(), fps(&pts, 10, 42).unwrap());
    }

    #[test]
    fn topology_rejects_duplicates_and_range() {
        let k = vec![EdgeKind::Structural; 2];
        assert!(Topology::new(3, vec![[0, 1], [1, 0]], k.clone(), vec![]).is_err());
        assert!(Topology::new(2, vec![[0, 1], [1, 2]], k, vec![]).is_err());
        assert!(Topology::new(3, vec![], vec![], vec![[0, 1, 3]]).is_err());
    }

    #[test]
    fn point_cloud_validates() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert_eq!(PointCloud::new(vec![[0.0; 3]]).unwrap().len(), 1);
    }
}
