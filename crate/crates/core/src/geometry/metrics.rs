use serde::{Deserialize, Serialize};

use super::{dist, dist2, fps_from, min_cost_assignment, ClothMesh, Vec3};
use crate::error::{Error, Result};

/// Sets larger than this are reduced by farthest point sampling before the
/// exact assignment is solved.
pub const EMD_MAX_POINTS: usize = 512;

/// Metric triple written by the evaluation tools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub mse: f64,
    pub cd: f64,
    pub emd: f64,
}

impl MetricRecord {
    pub fn between(pred: &ClothMesh, truth: &ClothMesh) -> Result<Self> {
        Ok(Self {
            mse: mse(pred, truth)?,
            cd: chamfer(pred.vertices(), truth.vertices())?,
            emd: emd(pred.vertices(), truth.vertices())?,
        })
    }
}

/// Mean squared vertex error under known correspondence.
pub fn mse(a: &ClothMesh, b: &ClothMesh) -> Result<f64> {
    if a.n_vertices() != b.n_vertices() {
        return Err(Error::Correspondence(format!(
            "vertex counts differ: {} vs {}",
            a.n_vertices(),
            b.n_vertices()
        )));
    }
    if !a.same_connectivity(b) {
        return Err(Error::Correspondence(
            "meshes have different connectivity".into(),
        ));
    }
    Ok(mse_points(a.vertices(), b.vertices()))
}

pub(crate) fn mse_points(a: &[Vec3], b: &[Vec3]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| dist2(*p, *q)).sum();
    s / a.len().max(1) as f64
}

/// Bidirectional Chamfer distance with squared nearest-neighbour distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("chamfer distance of an empty set".into()));
    }
    Ok(one_sided(a, b) + one_sided(b, a))
}

fn one_sided(from: &[Vec3], to: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for &x in from {
        let mut best = f64::INFINITY;
        for &y in to {
            let d = dist2(x, y);
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / from.len() as f64
}

/// Earth Mover's Distance: mean Euclidean matching cost under the optimal
/// one-to-one assignment.
///
/// When the sets differ in size, the larger one is reduced to the size of the
/// smaller by farthest point sampling; sets above [`EMD_MAX_POINTS`] are
/// reduced to that size first.
pub fn emd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("EMD of an empty set".into()));
    }
    let n = a.len().min(b.len()).min(EMD_MAX_POINTS);
    let a = resample(a, n)?;
    let b = resample(b, n)?;
    if a.len() != b.len() {
        return Err(Error::Domain(format!(
            "EMD needs equal sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut cost = vec![0.0; n * n];
    for (i, &p) in a.iter().enumerate() {
        for (j, &q) in b.iter().enumerate() {
            cost[i * n + j] = dist(p, q);
        }
    }
    let (_, total) = min_cost_assignment(&cost, n);
    Ok(total / n as f64)
}

fn resample(points: &[Vec3], n: usize) -> Result<Vec<Vec3>> {
    if points.len() == n {
        return Ok(points.to_vec());
    }
    Ok(fps_from(points, n, 0)?
        .into_iter()
        .map(|i| points[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Topology;
    use std::sync::Arc;

    fn square(z: f64) -> ClothMesh {
        let topo = Arc::new(Topology::from_faces(4, vec![[0, 1, 2], [1, 3, 2]]).unwrap());
        ClothMesh::new(
            vec![[0.0, 0.0, z], [1.0, 0.0, z], [0.0, 1.0, z], [1.0, 1.0, z]],
            topo,
        )
        .unwrap()
    }

    #[test]
    fn mse_cases() {
        let a = square(0.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = square(0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());

        let t1 = Arc::new(Topology::new(1, vec![], vec![], vec![]).unwrap());
        let p = ClothMesh::new(vec![[0.0; 3]], t1.clone()).unwrap();
        let q = ClothMesh::new(vec![[1.0, 0.0, 0.0]], t1).unwrap();
        assert_eq!(mse(&p, &q).unwrap(), 1.0);
        assert!(matches!(mse(&p, &a), Err(Error::Correspondence(_))));
    }

    #[test]
    fn chamfer_cases() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]];
        assert_eq!(chamfer(&a, &b).unwrap(), 3.5);
        assert_eq!(chamfer(&b, &b).unwrap(), 0.0);
        assert!(chamfer(&a, &[]).is_err());
    }

    #[test]
    fn emd_cases() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(emd(&a, &b).unwrap(), 0.0);
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
        let c = vec![[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]];
        assert!((emd(&a, &c).unwrap() - 1.0).abs() < 1e-12);
        // Unequal sizes are reduced by FPS to the smaller size.
        let d = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        assert!(emd(&a, &d).unwrap() >= 0.0);
    }
}
