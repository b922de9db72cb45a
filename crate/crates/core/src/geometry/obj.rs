//! Minimal Wavefront OBJ subset: `v` and triangular `f` records.

use std::fmt::Write as _;
use std::sync::Arc;

use super::{ClothMesh, Topology, Vec3};
use crate::error::{Error, Result};

pub fn write_obj(mesh: &ClothMesh) -> String {
    let mut out = String::with_capacity(mesh.n_vertices() * 40);
    for v in mesh.vertices() {
        // `{:?}` on f64 prints the shortest round-trip representation.
        let _ = writeln!(out, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

/// Parses vertices and triangles; edges are the unique face edges.
pub fn parse_obj(text: &str) -> Result<ClothMesh> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
                if coords.len() != 3 {
                    return Err(Error::Format(format!(
                        "line {}: vertex needs 3 coordinates",
                        lineno + 1
                    )));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|s| {
                        let first = s.split('/').next().unwrap_or("");
                        first
                            .parse::<usize>()
                            .ok()
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                    })
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Format(format!("line {}: bad face index", lineno + 1)))?;
                if idx.len() != 3 {
                    return Err(Error::Format(format!(
                        "line {}: only triangles are supported, got {} indices",
                        lineno + 1,
                        idx.len()
                    )));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let topo = Topology::from_faces(vertices.len(), faces)?;
    ClothMesh::new(vertices, Arc::new(topo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_positions_and_faces() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 0 1 0.25\nv 1 1 0\nf 1 2 3\nf 2/1 4/1 3/1\n";
        let mesh = parse_obj(text).unwrap();
        assert_eq!(mesh.n_vertices(), 4);
        assert_eq!(mesh.edges().len(), 5);
        let again = parse_obj(&write_obj(&mesh)).unwrap();
        assert_eq!(again.vertices(), mesh.vertices());
        assert_eq!(again.faces(), mesh.faces());
    }

    #[test]
    fn rejects_quads() {
        assert!(parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").is_err());
    }
}
