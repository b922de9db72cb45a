//! Synthetic partial observations, augmentation and tokenization.
//!
//! Mesh tokenization is a Voronoi partition of the canonical vertices around
//! FPS centres; cloud tokenization uses FPS centres with radius-clipped KNN
//! groups of fixed size.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, fps, ClothMesh, PointCloud, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub position: Vec3,
    pub look_at: Vec3,
    /// Vertical field of view.
    pub fov_deg: f64,
    pub resolution: (u32, u32),
}

impl CameraPose {
    pub fn new(position: Vec3, look_at: Vec3) -> Result<Self> {
        let c = Self {
            position,
            look_at,
            fov_deg: 60.0,
            resolution: (640, 480),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if geometry::dist(self.position, self.look_at) <= 0.0 {
            return Err(Error::Domain("camera position equals look_at".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Domain(format!(
                "field of view {} outside (0, 180)",
                self.fov_deg
            )));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::Domain("camera resolution must be positive".into()));
        }
        Ok(())
    }

    /// Whether `p` projects inside the image.
    pub fn in_frustum(&self, p: Vec3) -> bool {
        let fwd = normalize(geometry::sub(self.look_at, self.position));
        let helper = if fwd[2].abs() > 0.99 {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let right = normalize(geometry::cross(fwd, helper));
        let up = geometry::cross(right, fwd);
        let d = geometry::sub(p, self.position);
        let z = geometry::dot(d, fwd);
        if z <= 0.0 {
            return false;
        }
        let tan_v = (0.5 * self.fov_deg.to_radians()).tan();
        let aspect = self.resolution.0 as f64 / self.resolution.1 as f64;
        geometry::dot(d, up).abs() <= tan_v * z
            && geometry::dot(d, right).abs() <= tan_v * aspect * z
    }
}

fn normalize(v: Vec3) -> Vec3 {
    geometry::scale(v, 1.0 / geometry::norm(v))
}

/// `n` cameras around `look_at`, evenly spaced in azimuth with jitter,
/// elevations between 35 and 70 degrees and distances between 0.8 and 1.2 m.
pub fn random_cameras<R: Rng + ?Sized>(look_at: Vec3, n: usize, rng: &mut R) -> Vec<CameraPose> {
    let offset = rng.random_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|i| {
            let az =
                offset + std::f64::consts::TAU * i as f64 / n as f64 + rng.random_range(-0.3..0.3);
            let el = rng.random_range(35f64..70.0).to_radians();
            let r = rng.random_range(0.8..1.2);
            let pos = [
                look_at[0] + r * el.cos() * az.cos(),
                look_at[1] + r * el.cos() * az.sin(),
                look_at[2] + r * el.sin(),
            ];
            CameraPose {
                position: pos,
                look_at,
                fov_deg: 60.0,
                resolution: (640, 480),
            }
        })
        .collect()
}

/// Möller–Trumbore; returns the ray parameter of the hit.
fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = geometry::sub(b, a);
    let e2 = geometry::sub(c, a);
    let p = geometry::cross(dir, e2);
    let det = geometry::dot(e1, p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = geometry::sub(origin, a);
    let u = geometry::dot(s, p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = geometry::cross(s, e1);
    let v = geometry::dot(dir, q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(geometry::dot(e2, q) * inv)
}

/// Whether the segment from the camera to `p` is free of nearer triangles.
fn visible_from(mesh: &ClothMesh, cam: &CameraPose, p: Vec3) -> bool {
    if !cam.in_frustum(p) {
        return false;
    }
    let dir = geometry::sub(p, cam.position);
    let len = geometry::norm(dir);
    let limit = 1.0 - 1e-6 / len;
    let v = mesh.vertices();
    !mesh.faces().iter().any(|f| matches!(ray_triangle(cam.position, dir, v[f[0]], v[f[1]], v[f[2]]), Some(t) if t > 0.0 && t < limit))
}

/// Uniform random points on every face, `samples_per_face` each.
pub fn sample_surface<R: Rng + ?Sized>(
    mesh: &ClothMesh,
    samples_per_face: usize,
    rng: &mut R,
) -> Vec<Vec3> {
    let v = mesh.vertices();
    let mut out = Vec::with_capacity(mesh.faces().len() * samples_per_face);
    for f in mesh.faces() {
        for _ in 0..samples_per_face {
            let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            let e1 = geometry::sub(v[f[1]], v[f[0]]);
            let e2 = geometry::sub(v[f[2]], v[f[0]]);
            out.push(geometry::add(
                v[f[0]],
                geometry::add(geometry::scale(e1, r1), geometry::scale(e2, r2)),
            ));
        }
    }
    out
}

/// Fused surface samples visible from at least one camera.
pub fn render_partial_cloud<R: Rng + ?Sized>(
    mesh: &ClothMesh,
    cameras: &[CameraPose],
    samples_per_face: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    if cameras.is_empty() {
        return Err(Error::Domain("at least one camera is required".into()));
    }
    if mesh.faces().is_empty() {
        return Err(Error::Domain("rendering needs a mesh with faces".into()));
    }
    for c in cameras {
        c.validate()?;
    }
    let samples = sample_surface(mesh, samples_per_face, rng);
    let pts: Vec<Vec3> = samples
        .into_iter()
        .filter(|&p| cameras.iter().any(|c| visible_from(mesh, c, p)))
        .collect();
    if pts.is_empty() {
        return Err(Error::EmptyObservation);
    }
    PointCloud::new(pts)
}

/// Fraction of `samples` visible from at least one camera.
pub fn visible_fraction(mesh: &ClothMesh, cameras: &[CameraPose], samples: &[Vec3]) -> f64 {
    let n = samples
        .iter()
        .filter(|&&p| cameras.iter().any(|c| visible_from(mesh, c, p)))
        .count();
    n as f64 / samples.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub rot_range_deg: f64,
    pub trans_range_m: f64,
    pub dropout_range: [f64; 2],
    pub noise_sigma: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rot_range_deg: 1.5,
            trans_range_m: 0.005,
            dropout_range: [0.1, 0.2],
            noise_sigma: 0.002,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self {
            rot_range_deg: 0.0,
            trans_range_m: 0.0,
            dropout_range: [0.0, 0.0],
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.dropout_range;
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(
                "dropout_range must be an interval inside [0, 1)".into(),
            ));
        }
        if self.rot_range_deg < 0.0 || self.trans_range_m < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("augmentation ranges must be >= 0".into()));
        }
        Ok(())
    }
}

/// Rodrigues rotation matrix for a unit axis.
fn rotation(axis: Vec3, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Rigid perturbation about the centroid, then dropout, then jitter.
pub fn augment<R: Rng + ?Sized>(
    cloud: &PointCloud,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<PointCloud> {
    params.validate()?;
    let mut pts = cloud.points().to_vec();
    let angle = if params.rot_range_deg > 0.0 {
        rng.random_range(-params.rot_range_deg..=params.rot_range_deg)
            .to_radians()
    } else {
        0.0
    };
    if angle != 0.0 {
        let axis = loop {
            let a: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = geometry::norm(a);
            if n > 1e-9 {
                break geometry::scale(a, 1.0 / n);
            }
        };
        let r = rotation(axis, angle);
        let c = geometry::centroid(&pts);
        for p in &mut pts {
            let d = geometry::sub(*p, c);
            *p = geometry::add(c, std::array::from_fn(|i| geometry::dot(r[i], d)));
        }
    }
    if params.trans_range_m > 0.0 {
        let t: Vec3 =
            std::array::from_fn(|_| rng.random_range(-params.trans_range_m..=params.trans_range_m));
        for p in &mut pts {
            *p = geometry::add(*p, t);
        }
    }
    let [lo, hi] = params.dropout_range;
    let frac = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let keep = ((pts.len() as f64) * (1.0 - frac)).round() as usize;
    if keep < pts.len() {
        let mut idx = index::sample(rng, pts.len(), keep).into_vec();
        idx.sort_unstable();
        pts = idx.into_iter().map(|i| pts[i]).collect();
    }
    if params.noise_sigma > 0.0 {
        for p in &mut pts {
            for c in p.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *c += params.noise_sigma * z;
            }
        }
    }
    PointCloud::new(pts)
}

/// Centres plus a grouping of the source points around them.
///
/// For meshes the groups are the Voronoi cells (a partition). For clouds
/// they are fixed-size KNN neighbourhoods, which may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Vec3>,
    pub center_indices: Vec<usize>,
    /// Nearest centre of every source point, ties to the lower index.
    pub assignment: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
}

impl PatchSet {
    pub fn n_patches(&self) -> usize {
        self.centers.len()
    }

    /// Groups padded to `size` by repeating their first member, flattened
    /// row-major. Groups larger than `size` are an error.
    pub fn padded_groups(&self, size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.groups.len() * size);
        for g in &self.groups {
            if g.is_empty() || g.len() > size {
                return Err(Error::Shape(format!(
                    "group of {} members does not fit {size}",
                    g.len()
                )));
            }
            out.extend_from_slice(g);
            out.extend(std::iter::repeat_n(g[0], size - g.len()));
        }
        Ok(out)
    }

    pub fn max_group_size(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }
}

fn voronoi(points: &[Vec3], centers: &[Vec3]) -> Vec<usize> {
    points
        .iter()
        .map(|&p| geometry::nearest_index(p, centers))
        .collect()
}

/// FPS centres and radius-clipped KNN groups of exactly `group_size`.
/// Neighbourhoods with fewer in-radius points are padded with the nearest.
pub fn tokenize_cloud<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n_groups: usize,
    group_size: usize,
    radius: f64,
    rng: &mut R,
) -> Result<PatchSet> {
    let pts = cloud.points();
    if n_groups == 0 || group_size == 0 {
        return Err(Error::Domain(
            "n_groups and group_size must be positive".into(),
        ));
    }
    if n_groups > pts.len() {
        return Err(Error::Domain(format!(
            "cloud of {} points cannot provide {n_groups} groups",
            pts.len()
        )));
    }
    let center_indices = fps(pts, n_groups, rng.random())?;
    let centers: Vec<Vec3> = center_indices.iter().map(|&i| pts[i]).collect();
    let r2 = radius * radius;
    let groups = centers
        .iter()
        .map(|&c| {
            let mut near: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(i, &p)| (geometry::dist2(p, c), i))
                .filter(|&(d, _)| d <= r2)
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(group_size);
            let mut g: Vec<usize> = near.into_iter().map(|(_, i)| i).collect();
            let first = g[0];
            g.resize(group_size, first);
            g
        })
        .collect();
    Ok(PatchSet {
        assignment: voronoi(pts, &centers),
        centers,
        center_indices,
        groups,
    })
}

/// Voronoi partition of the canonical vertices around FPS centres. Because it
/// only looks at canonical positions, it is shared by every deformed state.
pub fn tokenize_mesh(canonical: &ClothMesh, n_patches: usize, seed: u64) -> Result<PatchSet> {
    let v = canonical.vertices();
    if n_patches == 0 || n_patches > v.len() {
        return Err(Error::Domain(format!(
            "cannot form {n_patches} patches from {} vertices",
            v.len()
        )));
    }
    let center_indices = fps(v, n_patches, seed)?;
    let centers: Vec<Vec3> = center_indices.iter().map(|&i| v[i]).collect();
    let assignment = voronoi(v, &centers);
    let mut groups = vec![Vec::new(); n_patches];
    for (i, &a) in assignment.iter().enumerate() {
        groups[a].push(i);
    }
    Ok(PatchSet {
        centers,
        center_indices,
        assignment,
        groups,
    })
}

/// Per-vertex inverse-distance weights over the `k` nearest patch centres.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeWeights {
    pub k: usize,
    /// `n_vertices * k` centre indices.
    pub indices: Vec<usize>,
    /// `n_vertices * k` weights, each row summing to one.
    pub weights: Vec<f64>,
}

pub const DECODE_EPS: f64 = 1e-8;

pub fn interpolate_decode_weights(
    canonical: &ClothMesh,
    patches: &PatchSet,
    k: usize,
) -> Result<DecodeWeights> {
    let k = k.min(patches.n_patches());
    if k == 0 {
        return Err(Error::Domain("decoding needs at least one patch".into()));
    }
    let mut indices = Vec::with_capacity(canonical.n_vertices() * k);
    let mut weights = Vec::with_capacity(canonical.n_vertices() * k);
    for &p in canonical.vertices() {
        let mut d: Vec<(f64, usize)> = patches
            .centers
            .iter()
            .enumerate()
            .map(|(i, &c)| (geometry::dist(p, c), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
        if d[0].0 == 0.0 {
            for (j, &(_, i)) in d.iter().enumerate() {
                indices.push(i);
                weights.push(if j == 0 { 1.0 } else { 0.0 });
            }
            continue;
        }
        let inv: Vec<f64> = d.iter().map(|&(x, _)| 1.0 / (x + DECODE_EPS)).collect();
        let s: f64 = inv.iter().sum();
        for (&(_, i), w) in d.iter().zip(inv) {
            indices.push(i);
            weights.push(w / s);
        }
    }
    Ok(DecodeWeights {
        k,
        indices,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clothsim::make_grid_cloth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn top_camera() -> CameraPose {
        CameraPose::new([0.175, 0.175, 1.0], [0.175, 0.175, 0.0]).unwrap()
    }

    #[test]
    fn top_camera_sees_flat_cloth() {
        let mesh = make_grid_cloth(8, 8, 0.05, 0.001).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = render_partial_cloud(&mesh, &[top_camera()], 3, &mut rng).unwrap();
        assert_eq!(cloud.len(), mesh.faces().len() * 3);
    }

    #[test]
    fn camera_validation() {
        assert!(CameraPose::new([0.0; 3], [0.0; 3]).is_err());
        let mut c = top_camera();
        c.fov_deg = 180.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn camera_below_ground_sees_nothing() {
        let mesh = make_grid_cloth(4, 4, 0.05, 0.001).unwrap();
        let cam = CameraPose::new([0.0, 0.0, 1.0], [0.0, 0.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            render_partial_cloud(&mesh, &[cam], 2, &mut rng),
            Err(Error::EmptyObservation)
        ));
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..50)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let out = augment(&cloud, &AugmentParams::none(), &mut rng).unwrap();
        assert_eq!(out.points(), cloud.points());
    }

    #[test]
    fn dropout_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = PointCloud::new((0..100).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let p = AugmentParams {
            dropout_range: [0.5, 0.5],
            ..AugmentParams::none()
        };
        assert_eq!(augment(&cloud, &p, &mut rng).unwrap().len(), 50);
        let bad = AugmentParams {
            dropout_range: [0.5, 1.0],
            ..AugmentParams::none()
        };
        assert!(augment(&cloud, &bad, &mut rng).is_err());
    }

    #[test]
    fn singleton_patches() {
        let mesh = make_grid_cloth(4, 4, 0.1, 0.0).unwrap();
        let p = tokenize_mesh(&mesh, 16, 3).unwrap();
        assert!(p.groups.iter().all(|g| g.len() == 1));
        for (i, &a) in p.assignment.iter().enumerate() {
            assert_eq!(p.center_indices[a], i);
        }
        assert!(tokenize_mesh(&mesh, 17, 3).is_err());
    }

    #[test]
    fn every_point_a_center() {
        let pts: Vec<Vec3> = (0..32)
            .map(|i| [(i % 8) as f64 * 0.1, (i / 8) as f64 * 0.1, 0.0])
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = tokenize_cloud(&cloud, 32, 4, 0.15, &mut rng).unwrap();
        let mut c = p.center_indices.clone();
        c.sort_unstable();
        assert_eq!(c, (0..32).collect::<Vec<_>>());
        for (g, &ci) in p.groups.iter().zip(&p.center_indices) {
            assert_eq!(g[0], ci);
            assert_eq!(g.len(), 4);
        }
        assert!(tokenize_cloud(&cloud, 33, 4, 0.15, &mut rng).is_err());
    }

    #[test]
    fn decode_weights_one_hot_and_symmetric() {
        let mesh = make_grid_cloth(4, 4, 0.1, 0.0).unwrap();
        let p = tokenize_mesh(&mesh, 5, 0).unwrap();
        let w = interpolate_decode_weights(&mesh, &p, 3).unwrap();
        for (c, &vi) in p.center_indices.iter().enumerate() {
            assert_eq!(w.indices[vi * 3], c);
            assert_eq!(&w.weights[vi * 3..vi * 3 + 3], &[1.0, 0.0, 0.0]);
        }
        for row in w.weights.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        // A vertex at the centre of an equilateral triangle of centres.
        let topo =
            std::sync::Arc::new(crate::geometry::Topology::new(4, vec![], vec![], vec![]).unwrap());
        let h = 3f64.sqrt() / 2.0;
        let m = ClothMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.5, h, 0.0],
                [0.5, h / 3.0, 0.0],
            ],
            topo,
        )
        .unwrap();
        let ps = PatchSet {
            centers: m.vertices()[..3].to_vec(),
            center_indices: vec![0, 1, 2],
            assignment: vec![0, 1, 2, 0],
            groups: vec![vec![0, 3], vec![1], vec![2]],
        };
        let w = interpolate_decode_weights(&m, &ps, 3).unwrap();
        for &x in &w.weights[9..12] {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_groups_repeat_first_member() {
        let mesh = make_grid_cloth(4, 4, 0.1, 0.0).unwrap();
        let p = tokenize_mesh(&mesh, 3, 1).unwrap();
        let m = p.max_group_size();
        let flat = p.padded_groups(m).unwrap();
        for (g, row) in p.groups.iter().zip(flat.chunks(m)) {
            assert_eq!(&row[..g.len()], &g[..]);
            assert!(row[g.len()..].iter().all(|&i| i == g[0]));
        }
        assert!(p.padded_groups(m - 1).is_err());
    }
}
