use clothdiff_core::clothsim::make_grid_cloth;
use clothdiff_core::geometry::{self, ClothMesh, PointCloud, Vec3};
use clothdiff_core::observation::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8x8 grid folded along its middle column line: the right half is mirrored
/// on top of the left half, 1 cm above it.
fn folded() -> ClothMesh {
    let flat = make_grid_cloth(8, 8, 0.05, 0.001).unwrap();
    let axis = 0.175;
    let v: Vec<Vec3> = flat
        .vertices()
        .iter()
        .map(|&[x, y, z]| {
            if x > axis {
                [2.0 * axis - x, y, z + 0.01]
            } else {
                [x, y, z]
            }
        })
        .collect();
    flat.with_vertices(v).unwrap()
}

fn dist_to_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    // Barycentric projection with a brute-force edge fallback.
    let n = geometry::cross(geometry::sub(b, a), geometry::sub(c, a));
    let nn = geometry::norm(n);
    let n = geometry::scale(n, 1.0 / nn);
    let h = geometry::dot(geometry::sub(p, a), n);
    let q = geometry::sub(p, geometry::scale(n, h));
    let area = |x: Vec3, y: Vec3, z: Vec3| {
        geometry::dot(geometry::cross(geometry::sub(y, x), geometry::sub(z, x)), n)
    };
    let (u, v, w) = (area(q, b, c) / nn, area(a, q, c) / nn, area(a, b, q) / nn);
    if u >= -1e-12 && v >= -1e-12 && w >= -1e-12 {
        return h.abs();
    }
    let seg = |x: Vec3, y: Vec3| {
        let d = geometry::sub(y, x);
        let t = (geometry::dot(geometry::sub(p, x), d) / geometry::dot(d, d)).clamp(0.0, 1.0);
        geometry::dist(p, geometry::add(x, geometry::scale(d, t)))
    };
    seg(a, b).min(seg(b, c)).min(seg(c, a))
}

#[test]
fn folded_cloth_hides_bottom_layer() {
    let mesh = folded();
    let cam = CameraPose::new([0.09, 0.175, 1.0], [0.09, 0.175, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples = sample_surface(&mesh, 4, &mut rng);
    let frac = visible_fraction(&mesh, &[cam], &samples);
    assert!(frac < 0.6, "visible fraction {frac}");
}

#[test]
fn more_cameras_see_more() {
    let flat = make_grid_cloth(8, 8, 0.05, 0.001).unwrap();
    // Drape over an invisible ridge so every view has self-occlusion.
    let v: Vec<Vec3> = flat
        .vertices()
        .iter()
        .map(|&[x, y, _]| [x, y, 0.001 + 0.15 * (-(x - 0.175).powi(2) / 0.004).exp()])
        .collect();
    let mesh = flat.with_vertices(v).unwrap();
    let c = [0.175, 0.175, 0.0];
    let cams: Vec<CameraPose> = (0..4)
        .map(|i| {
            let a = std::f64::consts::FRAC_PI_4 + std::f64::consts::FRAC_PI_2 * i as f64;
            CameraPose::new([c[0] + 0.8 * a.cos(), c[1] + 0.8 * a.sin(), 0.5], c).unwrap()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = sample_surface(&mesh, 4, &mut rng);
    let all = visible_fraction(&mesh, &cams, &samples);
    for cam in &cams {
        let one = visible_fraction(&mesh, std::slice::from_ref(cam), &samples);
        assert!(all > one, "union {all} vs single {one}");
    }
}

#[test]
fn rendered_points_lie_on_the_surface() {
    let mesh = folded();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cams = random_cameras([0.175, 0.175, 0.0], 4, &mut rng);
    let cloud = render_partial_cloud(&mesh, &cams, 2, &mut rng).unwrap();
    let v = mesh.vertices();
    for &p in cloud.points() {
        let d = mesh
            .faces()
            .iter()
            .map(|f| dist_to_triangle(p, v[f[0]], v[f[1]], v[f[2]]))
            .fold(f64::INFINITY, f64::min);
        assert!(d < 1e-6);
    }
}

#[test]
fn augmentation_rotation_is_bounded_and_rigid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<Vec3> = (0..200)
        .map(|_| [rng.random::<f64>(), rng.random(), 0.2 * rng.random::<f64>()])
        .collect();
    let cloud = PointCloud::new(pts.clone()).unwrap();
    let p = AugmentParams {
        rot_range_deg: 1.5,
        ..AugmentParams::none()
    };
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&cloud, &p, &mut r).unwrap();
        let c = geometry::centroid(&pts);
        for (a, b) in pts.iter().zip(out.points()) {
            let (da, db) = (geometry::sub(*a, c), geometry::sub(*b, c));
            let cos = (geometry::dot(da, db) / (geometry::norm(da) * geometry::norm(db)))
                .clamp(-1.0, 1.0);
            assert!(cos.acos().to_degrees() <= 1.5 + 1e-9);
        }
        for i in 0..20 {
            let j = 199 - i;
            let d0 = geometry::dist(pts[i], pts[j]);
            let d1 = geometry::dist(out.points()[i], out.points()[j]);
            assert!((d0 - d1).abs() < 1e-9);
        }
    }
    let t = AugmentParams {
        trans_range_m: 0.005,
        rot_range_deg: 1.5,
        ..AugmentParams::none()
    };
    let out = augment(&cloud, &t, &mut rng).unwrap();
    for i in 0..20 {
        let d0 = geometry::dist(pts[i], pts[i + 100]);
        let d1 = geometry::dist(out.points()[i], out.points()[i + 100]);
        assert!((d0 - d1).abs() < 1e-9);
    }
}

#[test]
fn two_clusters_get_one_center_each() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pts = Vec::new();
    for k in 0..2 {
        for _ in 0..20 {
            pts.push([
                k as f64 * 10.0 + 0.1 * rng.random::<f64>(),
                0.1 * rng.random::<f64>(),
                0.0,
            ]);
        }
    }
    let cloud = PointCloud::new(pts.clone()).unwrap();
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = tokenize_cloud(&cloud, 2, 8, 0.5, &mut r).unwrap();
        let clusters: Vec<usize> = p.centers.iter().map(|c| (c[0] > 5.0) as usize).collect();
        assert_ne!(clusters[0], clusters[1]);
    }
}

fn cloud_strategy() -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 10..80)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_groups_match_brute_force(pts in cloud_strategy(), seed in 0u64..1000, radius in 0.1f64..2.0) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let n_groups = 1 + (seed as usize % pts.len().min(8));
        let k = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = tokenize_cloud(&cloud, n_groups, k, radius, &mut rng).unwrap();
        for (g, &c) in p.groups.iter().zip(&p.centers) {
            prop_assert_eq!(g.len(), k);
            let mut all: Vec<(f64, usize)> = pts.iter().enumerate()
                .map(|(i, &q)| (geometry::dist2(q, c), i))
                .filter(|&(d, _)| d <= radius * radius)
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(k).map(|&(_, i)| i).collect();
            prop_assert_eq!(&g[..want.len()], &want[..]);
            for &extra in &g[want.len()..] {
                prop_assert_eq!(extra, want[0]);
            }
        }
    }

    #[test]
    fn voronoi_assignment_is_nearest(seed in 0u64..1000, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = make_grid_cloth(6, 5, 0.07, 0.0).unwrap();
        let v: Vec<Vec3> = mesh.vertices().iter().map(|&[x, y, z]| [x + 0.01 * rng.random::<f64>(), y, z]).collect();
        let mesh = mesh.with_vertices(v).unwrap();
        let p = tokenize_mesh(&mesh, n, seed).unwrap();
        let mut seen = vec![0usize; mesh.n_vertices()];
        for (ci, g) in p.groups.iter().enumerate() {
            for &i in g {
                seen[i] += 1;
                prop_assert_eq!(p.assignment[i], ci);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        for (i, &vtx) in mesh.vertices().iter().enumerate() {
            let a = p.assignment[i];
            let da = geometry::dist2(vtx, p.centers[a]);
            for (c, &center) in p.centers.iter().enumerate() {
                let dc = geometry::dist2(vtx, center);
                prop_assert!(da < dc || (da == dc && a <= c));
            }
        }
        // Same seed, different deformed state: the partition only sees the canonical mesh.
        let again = tokenize_mesh(&mesh, n, seed).unwrap();
        prop_assert_eq!(again, p);
    }

    #[test]
    fn decode_weights_normalized(seed in 0u64..1000, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = make_grid_cloth(4, 4, 0.1, 0.0).unwrap();
        let v: Vec<Vec3> = mesh.vertices().iter().map(|&[x, y, _]| [x, y, 0.05 * rng.random::<f64>()]).collect();
        let mesh = mesh.with_vertices(v).unwrap();
        let p = tokenize_mesh(&mesh, n, seed).unwrap();
        let w = interpolate_decode_weights(&mesh, &p, 3).unwrap();
        for row in w.weights.chunks(w.k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}
