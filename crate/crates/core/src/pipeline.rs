//! Dataset generation, dataset loading, evaluation reports and plot series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clothsim::{
    sample_action_sequence, ActionSampling, ActionStep, ClothState, SimParams, Simulator, Strategy,
};
use crate::dynamics::{DdmConfig, DdmModel, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{self, ClothMesh, MetricRecord, PointCloud, Vec3};
use crate::io::{points_from_file, points_to_file, ClothSpec, TensorData, TensorFile};
use crate::neural::gradcheck::{
    op_registry, perturb, run_cases, weighted_sum, CheckOptions, GradCase, GradCheckResult,
};
use crate::neural::{Graph, Tensor, TransformerConfig, Var};
use crate::observation::{augment, random_cameras, render_partial_cloud, AugmentParams};
use crate::perception::{DpmConfig, DpmModel, PerceptionSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Perception,
    Dynamics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub n_cameras: usize,
    pub samples_per_face: usize,
    /// Every stored cloud is resampled to exactly this many points.
    pub cloud_points: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_cameras: 4,
            samples_per_face: 6,
            cloud_points: 384,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub kind: DatasetKind,
    pub cloth: ClothSpec,
    pub sim: SimParams,
    pub augment: AugmentParams,
    pub actions: ActionSampling,
    pub render: RenderConfig,
    /// Probability of the pairwise strategy; the rest is directional.
    pub pairwise_fraction: f64,
    /// Trajectories for dynamics datasets, pairs for perception datasets.
    pub n_records: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Dynamics,
            cloth: ClothSpec::default(),
            sim: SimParams::default(),
            augment: AugmentParams::default(),
            actions: ActionSampling::default(),
            render: RenderConfig::default(),
            pairwise_fraction: 0.5,
            n_records: 100,
            seed: 0,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub files: Vec<String>,
    pub seed: u64,
    pub strategy: Strategy,
    /// Number of actions in the source sequence.
    pub sequence_length: usize,
    /// Step of the sequence a perception pair was taken from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub cloth: ClothSpec,
    pub sim: SimParams,
    pub augment: AugmentParams,
    pub actions: ActionSampling,
    pub render: RenderConfig,
    pub seed: u64,
    pub records: Vec<RecordMeta>,
}

/// SplitMix64 finaliser; decorrelates per-record seeds from the master.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Flat cloth on the ground after a settle phase.
pub fn initial_state(sim: &Simulator, canonical: &ClothMesh) -> Result<ClothState> {
    let mut s = ClothState::at_rest(canonical.clone());
    sim.settle(&mut s, sim.params().settle_substeps, None)?;
    Ok(s)
}

fn pick_strategy<R: Rng + ?Sized>(cfg: &GenDataConfig, rng: &mut R) -> Strategy {
    if rng.random_bool(cfg.pairwise_fraction.clamp(0.0, 1.0)) {
        Strategy::Pairwise
    } else {
        Strategy::Directional
    }
}

/// One simulated trajectory, resampled on blow-ups.
fn simulate<R: Rng + ?Sized>(
    cfg: &GenDataConfig,
    sim: &Simulator,
    start: &ClothState,
    rng: &mut R,
) -> Result<(Strategy, Trajectory)> {
    let mut last = None;
    for attempt in 0..=cfg.max_retries {
        let strategy = pick_strategy(cfg, rng);
        let actions = sample_action_sequence(&start.mesh, strategy, &cfg.actions, rng)?;
        match sim.rollout_meshes(start, &actions) {
            Ok(meshes) => {
                let mut states = vec![start.mesh.clone()];
                states.extend(meshes);
                return Ok((strategy, Trajectory { states, actions }));
            }
            Err(e) if e.is_numerical() => {
                log::warn!(
                    "simulation failed (attempt {}): {e}; resampling",
                    attempt + 1
                );
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Renders a partial, augmented cloud with exactly `cloud_points` points.
pub fn observe<R: Rng + ?Sized>(
    mesh: &ClothMesh,
    render: &RenderConfig,
    aug: &AugmentParams,
    rng: &mut R,
) -> Result<PointCloud> {
    let look = geometry::centroid(mesh.vertices());
    let cams = random_cameras(look, render.n_cameras, rng);
    let cloud = render_partial_cloud(mesh, &cams, render.samples_per_face, rng)?;
    let cloud = augment(&cloud, aug, rng)?;
    resample(&cloud, render.cloud_points, rng)
}

/// Random subset without replacement, or all points plus random repeats.
pub fn resample<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    let pts = cloud.points();
    if pts.is_empty() || n == 0 {
        return Err(Error::EmptyObservation);
    }
    let out: Vec<Vec3> = if pts.len() >= n {
        let mut idx = index::sample(rng, pts.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pts[i]).collect()
    } else {
        let mut v = pts.to_vec();
        while v.len() < n {
            v.push(pts[rng.random_range(0..pts.len())]);
        }
        v
    };
    PointCloud::new(out)
}

fn actions_to_file(actions: &[ActionStep]) -> TensorFile {
    let data = actions
        .iter()
        .flat_map(|a| [a.grasp_index as f64, a.delta[0], a.delta[1], a.delta[2]])
        .collect();
    TensorFile {
        shape: vec![actions.len() as u64, 4],
        data: TensorData::F64(data),
    }
}

fn actions_from_file(f: &TensorFile) -> Result<Vec<ActionStep>> {
    if f.shape.len() != 2 || f.shape[1] != 4 {
        return Err(Error::Format(format!(
            "expected [L, 4] actions, got {:?}",
            f.shape
        )));
    }
    f.data
        .to_f64()
        .chunks_exact(4)
        .map(|c| {
            if c[0] < 0.0 || c[0].fract() != 0.0 {
                return Err(Error::Format(format!("bad grasp index {}", c[0])));
            }
            Ok(ActionStep {
                grasp_index: c[0] as usize,
                delta: [c[1], c[2], c[3]],
            })
        })
        .collect()
}

fn states_to_file(states: &[ClothMesh]) -> TensorFile {
    let nv = states.first().map_or(0, ClothMesh::n_vertices);
    let data = states
        .iter()
        .flat_map(|m| m.vertices().iter().flatten().copied())
        .collect();
    TensorFile {
        shape: vec![states.len() as u64, nv as u64, 3],
        data: TensorData::F64(data),
    }
}

fn states_from_file(f: &TensorFile, canonical: &ClothMesh) -> Result<Vec<ClothMesh>> {
    let nv = canonical.n_vertices();
    if f.shape.len() != 3 || f.shape[1] as usize != nv || f.shape[2] != 3 {
        return Err(Error::Format(format!(
            "expected [T, {nv}, 3] states, got {:?}",
            f.shape
        )));
    }
    f.data
        .to_f64()
        .chunks_exact(nv * 3)
        .map(|c| canonical.with_vertices(c.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()))
        .collect()
}

/// Simulates and writes a dataset; returns its manifest.
pub fn gen_data(cfg: &GenDataConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.sim.validate()?;
    cfg.augment.validate()?;
    if cfg.render.n_cameras == 0 || cfg.render.cloud_points == 0 || cfg.render.samples_per_face == 0
    {
        return Err(Error::Config("render sizes must be positive".into()));
    }
    let canonical = cfg.cloth.build()?;
    let sim = Simulator::new(&canonical, cfg.sim.clone())?;
    let start = initial_state(&sim, &canonical)?;
    fs::create_dir_all(out)?;
    let mut records = Vec::with_capacity(cfg.n_records);
    for i in 0..cfg.n_records {
        let seed = derive_seed(cfg.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (strategy, traj) = simulate(cfg, &sim, &start, &mut rng)?;
        let rec = match cfg.kind {
            DatasetKind::Dynamics => {
                let files = vec![
                    format!("traj{i:05}_states.cdt"),
                    format!("traj{i:05}_actions.cdt"),
                ];
                states_to_file(&traj.states).write(&out.join(&files[0]))?;
                actions_to_file(&traj.actions).write(&out.join(&files[1]))?;
                RecordMeta {
                    files,
                    seed,
                    strategy,
                    sequence_length: traj.actions.len(),
                    step: None,
                }
            }
            DatasetKind::Perception => {
                let mut attempt = 0;
                let (step, cloud) = loop {
                    let step = rng.random_range(0..traj.states.len());
                    match observe(&traj.states[step], &cfg.render, &cfg.augment, &mut rng) {
                        Ok(c) => break (step, c),
                        Err(Error::EmptyObservation) if attempt < cfg.max_retries => attempt += 1,
                        Err(e) => return Err(e),
                    }
                };
                let files = vec![
                    format!("pair{i:05}_cloud.cdt"),
                    format!("pair{i:05}_mesh.cdt"),
                ];
                points_to_file(cloud.points()).write(&out.join(&files[0]))?;
                points_to_file(traj.states[step].vertices()).write(&out.join(&files[1]))?;
                RecordMeta {
                    files,
                    seed,
                    strategy,
                    sequence_length: traj.actions.len(),
                    step: Some(step),
                }
            }
        };
        records.push(rec);
    }
    let manifest = DatasetManifest {
        kind: cfg.kind,
        cloth: cfg.cloth,
        sim: cfg.sim.clone(),
        augment: cfg.augment.clone(),
        actions: cfg.actions.clone(),
        render: cfg.render.clone(),
        seed: cfg.seed,
        records,
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(
        dir.join("manifest.json"),
    )?)?)
}

fn expect_kind(m: &DatasetManifest, kind: DatasetKind) -> Result<()> {
    if m.kind != kind {
        return Err(Error::Config(format!(
            "dataset holds {:?} records, expected {kind:?}",
            m.kind
        )));
    }
    Ok(())
}

/// One trajectory from its states and actions tensor files.
pub fn load_trajectory(states: &Path, actions: &Path, canonical: &ClothMesh) -> Result<Trajectory> {
    let traj = Trajectory {
        states: states_from_file(&TensorFile::read(states)?, canonical)?,
        actions: actions_from_file(&TensorFile::read(actions)?)?,
    };
    traj.validate()?;
    Ok(traj)
}

pub fn load_trajectories(dir: &Path) -> Result<(DatasetManifest, Vec<Trajectory>)> {
    let m = read_manifest(dir)?;
    expect_kind(&m, DatasetKind::Dynamics)?;
    let canonical = m.cloth.build()?;
    let mut out = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let [s, a] = r.files.as_slice() else {
            return Err(Error::Format(
                "dynamics record needs a states and an actions file".into(),
            ));
        };
        out.push(load_trajectory(&dir.join(s), &dir.join(a), &canonical)?);
    }
    Ok((m, out))
}

pub fn load_perception(dir: &Path) -> Result<(DatasetManifest, Vec<PerceptionSample>)> {
    let m = read_manifest(dir)?;
    expect_kind(&m, DatasetKind::Perception)?;
    let canonical = m.cloth.build()?;
    let mut out = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let [c, v] = r.files.as_slice() else {
            return Err(Error::Format(
                "perception record needs a cloud and a mesh file".into(),
            ));
        };
        let cloud = PointCloud::new(points_from_file(&TensorFile::read(&dir.join(c))?)?)?;
        let mesh = canonical.with_vertices(points_from_file(&TensorFile::read(&dir.join(v))?)?)?;
        out.push(PerceptionSample { cloud, mesh });
    }
    Ok((m, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl Summary {
    /// Mean and `1.96 * sample std / sqrt(n)`; the interval is 0 for n < 2.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                ci95: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        Self { mean, ci95, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub mse: Summary,
    pub cd: Summary,
    pub emd: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: DatasetKind,
    pub metrics: BTreeMap<String, Summary>,
    /// Errors against rollout step for dynamics evaluations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_step: Vec<StepSummary>,
    pub records: Vec<MetricRecord>,
}

fn summarize(records: &[MetricRecord]) -> BTreeMap<String, Summary> {
    let col = |f: fn(&MetricRecord) -> f64| Summary::of(&records.iter().map(f).collect::<Vec<_>>());
    BTreeMap::from([
        ("mse".into(), col(|r| r.mse)),
        ("cd".into(), col(|r| r.cd)),
        ("emd".into(), col(|r| r.emd)),
    ])
}

/// Metrics of prediction/truth pairs.
pub fn report_pairs(kind: DatasetKind, pairs: &[(ClothMesh, ClothMesh)]) -> Result<EvalReport> {
    let records = pairs
        .iter()
        .map(|(p, t)| MetricRecord::between(p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        kind,
        metrics: summarize(&records),
        per_step: Vec::new(),
        records,
    })
}

/// State-estimation errors of the model over a perception dataset.
pub fn evaluate_perception(
    model: &DpmModel,
    data: &[PerceptionSample],
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        pairs.push((
            model.estimate(&model.canonical, &s.cloud, &mut rng, n_samples)?,
            s.mesh.clone(),
        ));
    }
    report_pairs(DatasetKind::Perception, &pairs)
}

/// Autoregressive rollout errors per step; `records` holds the final step
/// of every trajectory. Trajectories shorter than `horizon` are skipped.
pub fn evaluate_dynamics(
    model: &DdmModel,
    trajs: &[Trajectory],
    horizon: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut per_step: Vec<Vec<MetricRecord>> = vec![Vec::new(); horizon];
    for (i, t) in trajs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.actions.len() >= horizon)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let hist = t.history_at(0, model.config.history);
        let pred = model.rollout(&hist, &t.actions[..horizon], &mut rng)?;
        for (s, p) in pred.iter().enumerate() {
            per_step[s].push(MetricRecord::between(p, &t.states[s + 1])?);
        }
    }
    if per_step.first().is_none_or(Vec::is_empty) {
        return Err(Error::Config(format!(
            "no trajectory has {horizon} actions"
        )));
    }
    let steps = per_step
        .iter()
        .enumerate()
        .map(|(s, recs)| {
            let m = summarize(recs);
            StepSummary {
                step: s + 1,
                mse: m["mse"],
                cd: m["cd"],
                emd: m["emd"],
            }
        })
        .collect();
    let records = per_step.pop().unwrap_or_default();
    Ok(EvalReport {
        kind: DatasetKind::Dynamics,
        metrics: summarize(&records),
        per_step: steps,
        records,
    })
}

/// Per-record CSV with a header.
pub fn records_csv(report: &EvalReport) -> String {
    let mut s = String::from("record,mse,cd,emd\n");
    for (i, r) in report.records.iter().enumerate() {
        let _ = writeln!(s, "{i},{:?},{:?},{:?}", r.mse, r.cd, r.emd);
    }
    s
}

/// `step,emd_mean,emd_ci95` rows.
pub fn plot_emit(series: &[(usize, Summary)]) -> String {
    let mut s = String::from("step,emd_mean,emd_ci95\n");
    for (step, m) in series {
        let _ = writeln!(s, "{step},{:?},{:?}", m.mean, m.ci95);
    }
    s
}

/// EMD series of a dynamics report.
pub fn report_series(report: &EvalReport) -> Vec<(usize, Summary)> {
    report.per_step.iter().map(|s| (s.step, s.emd)).collect()
}

/// What `gradcheck` covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradScope {
    Ops,
    Dpm,
    Ddm,
    All,
}

fn miniature_transformer() -> TransformerConfig {
    TransformerConfig {
        n_heads: 2,
        head_dim: 4,
        n_layers: 1,
        inner_dim: 8,
        cross_attn_dim: 8,
        cond_dim: 8,
        ff_mult: 2,
        ..Default::default()
    }
}

fn miniature_state(canonical: &ClothMesh, rng: &mut ChaCha8Rng) -> Result<ClothMesh> {
    let v = canonical
        .vertices()
        .iter()
        .map(|&p| geometry::add(p, [0.0, 0.0, rng.random_range(0.0..0.03)]))
        .collect();
    canonical.with_vertices(v)
}

/// Full-model cases on a 4x4 cloth: the DPM and a DDM with `i = 1`, `j = 2`.
/// The loss is a fixed random projection of the predicted noise; the noisy
/// state and every parameter are checked.
pub fn model_gradcases(scope: GradScope, seed: u64) -> Result<Vec<GradCase>> {
    let canonical = crate::clothsim::make_grid_cloth(4, 4, 0.1, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    if matches!(scope, GradScope::Dpm | GradScope::All) {
        let cfg = DpmConfig {
            transformer: miniature_transformer(),
            patches: crate::patchnet::PatchConfig {
                n_patches: 4,
                decode_k: 2,
                seed: 0,
            },
            cloud_groups: 4,
            cloud_group_size: 4,
            cloud_hidden: 8,
            init_seed: seed,
            ..Default::default()
        };
        let mut m = DpmModel::new(&canonical, cfg)?;
        perturb(&mut m.store, &mut rng);
        let state = miniature_state(&canonical, &mut rng)?;
        let cloud = PointCloud::new(crate::observation::sample_surface(&state, 4, &mut rng))?;
        let (_, tokens) = m.prepare(&cloud, &mut rng)?;
        let net = m.net.clone();
        let k = m.schedule.steps() / 2;
        let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let y = net.forward(g, v[0], &[k], &[&tokens])?;
            weighted_sum(g, y, 7)
        };
        cases.push(GradCase {
            name: "dpm",
            store: m.store,
            inputs: vec![Tensor::randn(&[1, 16, 3], &mut rng)],
            f: Box::new(f),
        });
    }
    if matches!(scope, GradScope::Ddm | GradScope::All) {
        let cfg = DdmConfig {
            transformer: miniature_transformer(),
            patches: crate::patchnet::PatchConfig {
                n_patches: 4,
                decode_k: 2,
                seed: 0,
            },
            history: 1,
            future: 2,
            n_frequencies: 2,
            action_hidden: vec![8],
            init_seed: seed,
            ..Default::default()
        };
        let mut m = DdmModel::new(&canonical, cfg)?;
        perturb(&mut m.store, &mut rng);
        let history = vec![
            miniature_state(&canonical, &mut rng)?,
            miniature_state(&canonical, &mut rng)?,
        ];
        let deltas = vec![[0.03, 0.0, 0.02], [0.01, -0.02, 0.0]];
        let cond = m.condition(&history, &deltas, Some(5))?;
        let net = m.net.clone();
        let k = m.schedule.steps() / 2;
        let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let y = net.forward(g, v[0], &[k], &[&cond])?;
            weighted_sum(g, y, 11)
        };
        cases.push(GradCase {
            name: "ddm",
            store: m.store,
            inputs: vec![Tensor::randn(&[1, 2, 16, 3], &mut rng)],
            f: Box::new(f),
        });
    }
    Ok(cases)
}

/// Runs the registered op cases and/or the full-model cases at the fixed
/// 1e-4 threshold with `h = 1e-5` central differences.
pub fn run_gradcheck(scope: GradScope, seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut cases = Vec::new();
    if matches!(scope, GradScope::Ops | GradScope::All) {
        cases.extend(op_registry(seed)?);
    }
    cases.extend(model_gradcases(scope, seed)?);
    run_cases(
        &cases,
        GRADCHECK_THRESHOLD,
        CheckOptions {
            seed,
            ..Default::default()
        },
    )
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
