use clothdiff_core::clothsim::make_grid_cloth;
use clothdiff_core::geometry::{
    self, chamfer, emd, min_cost_assignment, mse, parse_obj, write_obj, Vec3,
};
use proptest::prelude::*;

fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| geometry::dist2(*p, *q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / x.len() as f64
    };
    one(a, b) + one(b, a)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_emd(a: &[Vec3], b: &[Vec3]) -> f64 {
    permutations(a.len())
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(i, &j)| geometry::dist2(a[i], b[j]).sqrt())
                .sum::<f64>()
                / a.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

fn cloud(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), n)
}

fn pair(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<Vec3>, Vec<Vec3>)> {
    n.prop_flat_map(|k| (cloud(k..k + 1), cloud(k..k + 1)))
}

proptest! {
    #[test]
    fn chamfer_matches_scan_and_is_symmetric(a in cloud(1..40), b in cloud(1..40)) {
        let c = chamfer(&a, &b).unwrap();
        prop_assert_eq!(c, brute_chamfer(&a, &b));
        prop_assert_eq!(c, chamfer(&b, &a).unwrap());
        prop_assert!(c >= 0.0);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn emd_matches_brute_force((a, b) in pair(1..7)) {
        let e = emd(&a, &b).unwrap();
        prop_assert!((e - brute_emd(&a, &b)).abs() < 1e-9);
        prop_assert!(emd(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn emd_is_permutation_invariant((a, b) in pair(2..20), shift in 0usize..20) {
        let mut r = b.clone();
        r.rotate_left(shift % b.len());
        prop_assert!((emd(&a, &b).unwrap() - emd(&a, &r).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn assignment_beats_identity(n in 1usize..12, seed in any::<u64>()) {
        let cost: Vec<f64> = (0..n * n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
        let (perm, total) = min_cost_assignment(&cost, n);
        let mut seen = perm.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let ident: f64 = (0..n).map(|i| cost[i * n + i]).sum();
        prop_assert!(total <= ident + 1e-9);
    }

    #[test]
    fn mse_of_translation_is_squared_shift(dx in -1.0f64..1.0, dz in -1.0f64..1.0) {
        let m = make_grid_cloth(3, 4, 0.1, 0.0).unwrap();
        let moved = m.with_vertices(m.vertices().iter().map(|&p| geometry::add(p, [dx, 0.0, dz])).collect()).unwrap();
        prop_assert!((mse(&m, &moved).unwrap() - (dx * dx + dz * dz)).abs() < 1e-12);
    }

    #[test]
    fn obj_round_trip_is_exact(z in prop::collection::vec(-1.0f64..1.0, 12)) {
        let m = make_grid_cloth(3, 4, 0.1, 0.0).unwrap();
        let m = m.with_vertices(m.vertices().iter().zip(&z).map(|(&p, &dz)| [p[0], p[1], dz]).collect()).unwrap();
        let back = parse_obj(&write_obj(&m)).unwrap();
        prop_assert_eq!(back.vertices(), m.vertices());
        prop_assert!(back.same_faces(&m));
    }
}

#[test]
fn empty_sets_are_rejected_and_sizes_reduced() {
    assert!(emd(&[], &[[0.0; 3]]).is_err());
    assert!(chamfer(&[], &[[0.0; 3]]).is_err());
    // The larger set is reduced by FPS from its first point.
    assert_eq!(emd(&[[0.0; 3]], &[[0.0; 3], [1.0; 3]]).unwrap(), 0.0);
}
