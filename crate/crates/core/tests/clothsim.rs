use clothdiff_core::clothsim::{
    make_grid_cloth, sample_action_sequence, ActionSampling, ClothState, SimParams, Simulator,
    Strategy,
};
use clothdiff_core::geometry;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (ClothState, Simulator) {
    let p = SimParams::default();
    let mesh = make_grid_cloth(8, 8, 0.05, p.floor()).unwrap();
    let sim = Simulator::new(&mesh, p).unwrap();
    (ClothState::at_rest(mesh), sim)
}

#[test]
fn random_actions_never_blow_up_or_penetrate() {
    let (state, sim) = setup();
    let cfg = ActionSampling {
        min_len: 35,
        max_len: 35,
        ..ActionSampling::default()
    };
    let ground = sim.params().ground_height;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strategy = if seed % 2 == 0 {
            Strategy::Directional
        } else {
            Strategy::Pairwise
        };
        let actions = sample_action_sequence(&state.mesh, strategy, &cfg, &mut rng).unwrap();
        let out = sim
            .rollout(&state, &actions)
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let mut target = state.mesh.vertices()[actions[0].grasp_index];
        for (s, a) in out.iter().zip(&actions) {
            target = geometry::add(target, a.delta);
            target[2] = target[2].max(sim.params().floor());
            assert_eq!(s.mesh.vertices()[a.grasp_index], target);
            for v in s.mesh.vertices() {
                assert!(v.iter().all(|c| c.is_finite()));
                assert!(v[2] >= ground - 1e-6);
            }
        }
    }
}

#[test]
fn rollouts_are_bit_identical() {
    let (state, sim) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let actions = sample_action_sequence(
        &state.mesh,
        Strategy::Directional,
        &ActionSampling::default(),
        &mut rng,
    )
    .unwrap();
    let a = sim.rollout_meshes(&state, &actions).unwrap();
    let b = sim.rollout_meshes(&state, &actions).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.vertices(), y.vertices());
    }
}
