use clothdiff_core::clothsim::Strategy;
use clothdiff_core::dynamics::{train_ddm, DdmConfig, DdmModel, Transition};
use clothdiff_core::geometry;
use clothdiff_core::io::{load_ddm, load_dpm, save_ddm, save_dpm, ClothSpec};
use clothdiff_core::neural::{Tensor, TransformerConfig};
use clothdiff_core::patchnet::PatchConfig;
use clothdiff_core::perception::{train_dpm, DpmConfig, DpmModel, PerceptionSample};
use clothdiff_core::pipeline::{
    gen_data, load_perception, load_trajectories, DatasetKind, GenDataConfig,
};
use clothdiff_core::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL: ClothSpec = ClothSpec {
    rows: 4,
    cols: 4,
    spacing: 0.08,
    height: 0.0,
};

fn transformer() -> TransformerConfig {
    TransformerConfig {
        n_heads: 2,
        head_dim: 8,
        n_layers: 1,
        inner_dim: 16,
        cross_attn_dim: 16,
        cond_dim: 16,
        ..Default::default()
    }
}

fn ddm_config() -> DdmConfig {
    DdmConfig {
        transformer: transformer(),
        patches: PatchConfig {
            n_patches: 4,
            decode_k: 2,
            seed: 0,
        },
        action_hidden: vec![16],
        ..Default::default()
    }
}

fn dpm_config() -> DpmConfig {
    DpmConfig {
        transformer: transformer(),
        patches: PatchConfig {
            n_patches: 4,
            decode_k: 2,
            seed: 0,
        },
        cloud_groups: 8,
        cloud_group_size: 8,
        cloud_hidden: 16,
        ..Default::default()
    }
}

fn transitions(n: usize) -> Vec<Transition> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenDataConfig {
        cloth: SMALL,
        n_records: 2,
        seed: 5,
        ..Default::default()
    };
    gen_data(&cfg, dir.path()).unwrap();
    let (_, trajs) = load_trajectories(dir.path()).unwrap();
    trajs
        .iter()
        .flat_map(|t| t.transitions(3, 5).unwrap())
        .take(n)
        .collect()
}

fn pairs(n: usize) -> Vec<PerceptionSample> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenDataConfig {
        kind: DatasetKind::Perception,
        cloth: SMALL,
        n_records: n,
        seed: 6,
        ..Default::default()
    };
    gen_data(&cfg, dir.path()).unwrap();
    load_perception(dir.path()).unwrap().1
}

#[test]
fn untrained_losses_are_near_one_per_element() {
    let canonical = SMALL.build().unwrap();
    let ddm = DdmModel::new(&canonical, ddm_config()).unwrap();
    let l = ddm.validation_loss(&transitions(16), 0).unwrap();
    assert!((l - 1.0).abs() < 0.1, "ddm init loss {l}");
    let dpm = DpmModel::new(&canonical, dpm_config()).unwrap();
    let l = dpm.validation_loss(&pairs(16), 0).unwrap();
    assert!((l - 1.0).abs() < 0.1, "dpm init loss {l}");
}

#[test]
fn ddm_overfits_eight_transitions_and_follows_the_mask() {
    let canonical = SMALL.build().unwrap();
    let data = transitions(8);
    let mut m = DdmModel::new(&canonical, ddm_config()).unwrap();
    let rep = train_ddm(
        &mut m,
        &data,
        &TrainConfig {
            steps: 3000,
            log_every: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(
        rep.final_smoothed(100) < 0.05,
        "smoothed loss {}",
        rep.final_smoothed(100)
    );

    let t = &data[0];
    let deltas = t.deltas.clone();
    let run = |seed| {
        m.predict(
            &t.history,
            &deltas,
            t.grasp_index,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    };
    let pred = run(1);
    let again = run(1);
    assert!(pred
        .iter()
        .zip(&again)
        .all(|(a, b)| a.vertices() == b.vertices()));
    for (p, f) in pred.iter().zip(&t.future) {
        assert!(p.same_faces(&canonical));
        assert!(geometry::mse(p, f).unwrap() < 1e-3);
    }
    let g = t.grasp_index.unwrap();
    let flipped = m
        .predict(
            &t.history,
            &deltas,
            Some((g + 5) % 16),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
    assert!(geometry::mse(&flipped[4], &pred[4]).unwrap() > 0.0);
}

#[test]
fn dpm_overfits_one_pair() {
    let canonical = SMALL.build().unwrap();
    let data = pairs(1);
    let mut m = DpmModel::new(&canonical, dpm_config()).unwrap();
    train_dpm(
        &mut m,
        &data,
        &TrainConfig {
            steps: 3000,
            log_every: 0,
            ..Default::default()
        },
    )
    .unwrap();
    let est = m
        .estimate(
            &canonical,
            &data[0].cloud,
            &mut ChaCha8Rng::seed_from_u64(0),
            1,
        )
        .unwrap();
    let e = geometry::mse(&est, &data[0].mesh).unwrap();
    assert!(e < 1e-3, "overfit mse {e}");
}

#[test]
fn dpm_loss_falls_on_four_samples() {
    let canonical = SMALL.build().unwrap();
    let wide = TransformerConfig {
        n_heads: 4,
        n_layers: 2,
        inner_dim: 32,
        cross_attn_dim: 32,
        cond_dim: 32,
        ..transformer()
    };
    let mut m = DpmModel::new(
        &canonical,
        DpmConfig {
            transformer: wide,
            ..dpm_config()
        },
    )
    .unwrap();
    let rep = train_dpm(
        &mut m,
        &pairs(4),
        &TrainConfig {
            steps: 2000,
            log_every: 0,
            ..Default::default()
        },
    )
    .unwrap();
    let ma = clothdiff_core::training::moving_average(&rep.losses, 100);
    let marks: Vec<f64> = [99, 600, 1200, 1999].iter().map(|&i| ma[i]).collect();
    assert!(marks.windows(2).all(|w| w[1] < w[0]), "{marks:?}");
    assert!(
        rep.final_smoothed(100) < 0.05,
        "smoothed loss {}",
        rep.final_smoothed(100)
    );
}

#[test]
fn checkpoints_round_trip() {
    let canonical = SMALL.build().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut ddm = DdmModel::new(&canonical, ddm_config()).unwrap();
    let data = transitions(4);
    train_ddm(
        &mut ddm,
        &data,
        &TrainConfig {
            steps: 3,
            log_every: 0,
            ..Default::default()
        },
    )
    .unwrap();
    save_ddm(&dir.path().join("ddm"), &ddm, &SMALL).unwrap();
    let (back, spec) = load_ddm(&dir.path().join("ddm")).unwrap();
    assert_eq!(spec, SMALL);
    let t = &data[0];
    let deltas = t.deltas.clone();
    let x = Tensor::randn(&[5, 16, 3], &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(
        ddm.denoise(&x, 7, &t.history, &deltas, t.grasp_index)
            .unwrap(),
        back.denoise(&x, 7, &t.history, &deltas, t.grasp_index)
            .unwrap()
    );

    let mut dpm = DpmModel::new(&canonical, dpm_config()).unwrap();
    let p = pairs(2);
    train_dpm(
        &mut dpm,
        &p,
        &TrainConfig {
            steps: 3,
            log_every: 0,
            ..Default::default()
        },
    )
    .unwrap();
    save_dpm(&dir.path().join("dpm"), &dpm, &SMALL).unwrap();
    let (back, _) = load_dpm(&dir.path().join("dpm")).unwrap();
    let x = Tensor::randn(&[16, 3], &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(
        dpm.denoise(&x, 9, &canonical, &p[0].cloud).unwrap(),
        back.denoise(&x, 9, &canonical, &p[0].cloud).unwrap()
    );
    assert!(load_dpm(&dir.path().join("ddm")).is_err());
}

#[test]
fn strategy_tags_survive_loading() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_data(
        &GenDataConfig {
            cloth: SMALL,
            n_records: 4,
            ..Default::default()
        },
        dir.path(),
    )
    .unwrap();
    assert!(m
        .records
        .iter()
        .all(|r| matches!(r.strategy, Strategy::Pairwise | Strategy::Directional)));
}
