use clothdiff_core::clothsim::{make_grid_cloth, SimParams, Simulator};
use clothdiff_core::geometry;
use clothdiff_core::planner::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn point_mass_reaches_goal_with_defaults() {
    let cfg = point_mass_config();
    assert_eq!(
        (
            cfg.n_iterations,
            cfg.n_samples,
            cfg.seq_length,
            cfg.init_std,
            cfg.temperature
        ),
        (5, 16, 5, 0.1, 1.0)
    );
    for seed in 0..10 {
        let run = point_mass_mpc(
            &cfg,
            [0.3, 0.0, 0.0],
            6,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        assert!(run.distance < 0.02, "seed {seed}: {}", run.distance);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn best_cost_never_increases(seed in any::<u64>(), gx in -0.3f64..0.3, gz in -0.3f64..0.3, tau in 1e-3f64..10.0) {
        let cfg = PlannerConfig { temperature: tau, ..point_mass_config() };
        let run = point_mass_mpc(&cfg, [gx, 0.1, gz], 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for opt in &run.chunks {
            prop_assert!(opt.best_history.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(*opt.best_history.last().unwrap(), opt.best_cost);
            let min_iter = opt.iteration_costs.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(opt.best_cost, min_iter);
            for a in &opt.best_actions {
                prop_assert!(a.iter().all(|x| x.abs() <= 0.1));
            }
        }
    }

    #[test]
    fn grasp_argmax_is_largest_displacement(seed in any::<u64>(), tau in 1e-3f64..1.0) {
        let m = make_grid_cloth(3, 3, 0.1, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<_> = m.vertices().iter().map(|&p| geometry::add(p, [0.0, 0.0, rand::Rng::random_range(&mut rng, 0.0..0.2)])).collect();
        let t = m.with_vertices(v).unwrap();
        let p = grasp_probabilities(&m, &t, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let arg = |xs: &[f64]| xs.iter().enumerate().fold(0, |b, (i, x)| if *x > xs[b] { i } else { b });
        let d: Vec<f64> = m.vertices().iter().zip(t.vertices()).map(|(a, b)| geometry::dist2(*a, *b)).collect();
        prop_assert_eq!(arg(&p), arg(&d));
    }

    #[test]
    fn informed_direction_is_linear(c in 0.1f64..5.0, seed in any::<u64>()) {
        let m = make_grid_cloth(3, 3, 0.1, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<_> = (0..9).map(|_| [rand::Rng::random_range(&mut rng, -0.1..0.1), 0.0, rand::Rng::random_range(&mut rng, 0.0..0.1)]).collect();
        let shifted = |s: f64| m.with_vertices(m.vertices().iter().zip(&d).map(|(&p, &x)| geometry::add(p, geometry::scale(x, s))).collect()).unwrap();
        let a = informed_direction(&m, &shifted(1.0), 4, 9, 0.01).unwrap();
        let b = informed_direction(&m, &shifted(c), 4, 9, 0.01).unwrap();
        for k in 0..3 {
            prop_assert!((b[k] - c * a[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn sim_oracle_plan_improves_on_the_initial_mean() {
    let p = SimParams::default();
    let canonical = make_grid_cloth(4, 4, 0.1, p.floor()).unwrap();
    let sim = Simulator::new(&canonical, p).unwrap();
    let (init, target) = diagonal_fold_task(&sim, &canonical).unwrap();
    let cfg = PlannerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = plan(
        &mut SimDynamics {
            sim: &sim,
            settle_steps: 0,
        },
        &[init.mesh.clone()],
        &target,
        &cfg,
        &mut rng,
    )
    .unwrap();
    assert_eq!(r.best_actions.len(), cfg.seq_length);
    assert!(r.best_history.windows(2).all(|w| w[1] <= w[0]));
    assert!(r
        .best_actions
        .iter()
        .all(|a| a.grasp_index == r.grasp_index));
    let before = state_cost(&init.mesh, &target, &cfg).unwrap();
    assert!(r.best_cost < before, "{} vs {before}", r.best_cost);
}
