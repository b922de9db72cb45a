use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use clothdiff_core::clothsim::Strategy;
use clothdiff_core::geometry;
use clothdiff_core::io::{TensorData, TensorFile};
use clothdiff_core::pipeline::*;
use proptest::prelude::*;

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| {
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn dynamics_dataset_counts_tags_and_magnitudes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenDataConfig {
        n_records: 10,
        ..Default::default()
    };
    let m = gen_data(&cfg, dir.path()).unwrap();
    assert_eq!(m.records.len(), 10);
    assert!(m.records.iter().any(|r| r.strategy == Strategy::Pairwise));
    assert!(m
        .records
        .iter()
        .any(|r| r.strategy == Strategy::Directional));
    let (_, trajs) = load_trajectories(dir.path()).unwrap();
    for (t, r) in trajs.iter().zip(&m.records) {
        assert_eq!(t.actions.len(), r.sequence_length);
        assert_eq!(t.states.len(), t.actions.len() + 1);
        for a in &t.actions {
            let n = geometry::norm(a.delta);
            assert!((0.02 - 1e-12..=0.05 + 1e-12).contains(&n), "magnitude {n}");
        }
    }
}

#[test]
fn regeneration_is_byte_identical() {
    for kind in [DatasetKind::Dynamics, DatasetKind::Perception] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = GenDataConfig {
            kind,
            n_records: 4,
            seed: 17,
            ..Default::default()
        };
        gen_data(&cfg, a.path()).unwrap();
        gen_data(&cfg, b.path()).unwrap();
        assert_eq!(files(a.path()), files(b.path()));
        let c = tempfile::tempdir().unwrap();
        gen_data(&GenDataConfig { seed: 18, ..cfg }, c.path()).unwrap();
        assert_ne!(files(a.path()), files(c.path()));
    }
}

#[test]
fn perception_dataset_loads_fixed_size_clouds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenDataConfig {
        kind: DatasetKind::Perception,
        n_records: 6,
        ..Default::default()
    };
    gen_data(&cfg, dir.path()).unwrap();
    let (m, data) = load_perception(dir.path()).unwrap();
    assert_eq!(m.kind, DatasetKind::Perception);
    assert_eq!(data.len(), 6);
    for s in &data {
        assert_eq!(s.cloud.len(), cfg.render.cloud_points);
        assert_eq!(s.mesh.n_vertices(), 64);
    }
    assert!(load_trajectories(dir.path()).is_err());
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(serde_json::from_str::<GenDataConfig>(r#"{"n_records": 3}"#).is_ok());
    assert!(serde_json::from_str::<GenDataConfig>(r#"{"n_record": 3}"#).is_err());
}

#[test]
fn report_json_round_trips_and_plot_passes_values_through() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(
        &GenDataConfig {
            n_records: 3,
            ..Default::default()
        },
        dir.path(),
    )
    .unwrap();
    let (_, trajs) = load_trajectories(dir.path()).unwrap();
    let pairs: Vec<_> = trajs
        .iter()
        .map(|t| (t.states[1].clone(), t.states[0].clone()))
        .collect();
    let r = report_pairs(DatasetKind::Dynamics, &pairs).unwrap();
    let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.metrics["mse"].n, 3);
    let series: Vec<(usize, Summary)> = (1..=20).map(|s| (s, r.metrics["emd"])).collect();
    let csv = plot_emit(&series);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 21);
    assert_eq!(lines[0], "step,emd_mean,emd_ci95");
    let row: Vec<f64> = lines[5].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[0], 5.0);
    assert!((row[1] - r.metrics["emd"].mean).abs() < 1e-12);
    assert!((row[2] - r.metrics["emd"].ci95).abs() < 1e-12);
}

proptest! {
    #[test]
    fn tensor_files_round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>(), which in 0u8..3) {
        let n: usize = shape.iter().product();
        let mut x = seed;
        let mut next = || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); x };
        let data = match which {
            0 => TensorData::F64((0..n).map(|_| f64::from_bits(next() >> 2)).collect()),
            1 => TensorData::F32((0..n).map(|_| f32::from_bits((next() >> 34) as u32)).collect()),
            _ => TensorData::U8((0..n).map(|_| next() as u8).collect()),
        };
        let f = TensorFile::new(&shape, data).unwrap();
        let bytes = f.to_bytes();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(&back, &f);
    }
}
