//! Sampling-based planner: grasp-point softmax, informed initial mean, and
//! an MPPI/CEM hybrid over action chunks, plus the closed MPC loop.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clothsim::{ActionStep, ClothState, Simulator};
use crate::dynamics::DdmModel;
use crate::error::{Error, Result};
use crate::geometry::{self, ClothMesh, Vec3};
use crate::observation::AugmentParams;
use crate::perception::DpmModel;
use crate::pipeline::{observe, RenderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// `N`
    pub n_iterations: usize,
    /// `K`; half Gaussian, half uniform.
    pub n_samples: usize,
    /// `L`
    pub seq_length: usize,
    /// Per-axis lower action bound (m).
    pub action_min: Vec3,
    /// Per-axis upper action bound (m).
    pub action_max: Vec3,
    /// Per-step length of the initial mean (m).
    pub init_magnitude: f64,
    /// `sigma_0`
    pub init_std: f64,
    /// `tau`
    pub temperature: f64,
    pub w_mse: f64,
    pub w_cd: f64,
    pub w_smooth: f64,
    /// `tau_g` (m).
    pub grasp_temperature: f64,
    /// Highest-error vertices used for the informed direction.
    pub informed_k: usize,
    /// `epsilon` (m).
    pub epsilon: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n_iterations: 5,
            n_samples: 16,
            seq_length: 5,
            action_min: [-0.05; 3],
            action_max: [0.05; 3],
            init_magnitude: 0.035,
            init_std: 0.1,
            temperature: 1.0,
            w_mse: 1.0,
            w_cd: 1.0,
            w_smooth: 0.1,
            grasp_temperature: 0.05,
            informed_k: 8,
            epsilon: 0.01,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations < 1 || self.n_samples < 2 || self.seq_length < 1 {
            return Err(Error::Config("N, L must be >= 1 and K >= 2".into()));
        }
        if self.n_samples % 2 != 0 {
            return Err(Error::Config("n_samples must be even".into()));
        }
        if !(self.init_std > 0.0) || !(self.temperature > 0.0) || !(self.grasp_temperature > 0.0) {
            return Err(Error::Config(
                "init_std, temperature and grasp_temperature must be > 0".into(),
            ));
        }
        if (0..3).any(|d| !(self.action_min[d] <= self.action_max[d])) {
            return Err(Error::Config(
                "action_min must not exceed action_max".into(),
            ));
        }
        if self.informed_k < 1 || !(self.epsilon >= 0.0) || !(self.init_magnitude >= 0.0) {
            return Err(Error::Config(
                "informed_k, epsilon or init_magnitude out of range".into(),
            ));
        }
        Ok(())
    }

    fn clip(&self, a: Vec3) -> Vec3 {
        std::array::from_fn(|d| a[d].clamp(self.action_min[d], self.action_max[d]))
    }
}

/// Outcome of the distribution search over one action chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimized {
    pub best_actions: Vec<Vec3>,
    pub best_cost: f64,
    /// Minimum cost of each iteration's samples.
    pub iteration_costs: Vec<f64>,
    /// Best cost seen up to and including each iteration.
    pub best_history: Vec<f64>,
    /// Standard deviation used to sample each iteration.
    pub sigma_history: Vec<f64>,
    /// Sampling mean after each update.
    pub mean_history: Vec<Vec<Vec3>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub grasp_index: usize,
    pub best_actions: Vec<ActionStep>,
    pub best_cost: f64,
    pub cost_history: Vec<f64>,
    pub best_history: Vec<f64>,
}

/// `w_smooth * sum ||a_{t+1} - a_t||^2`
pub fn smoothness(actions: &[Vec3]) -> f64 {
    actions
        .windows(2)
        .map(|w| geometry::dist2(w[1], w[0]))
        .sum()
}

/// Searches `L`-step action sequences. `cost` maps a batch of candidates to
/// their task costs; the smoothness penalty is added here.
///
/// Each iteration draws `K/2` Gaussian sequences around the mean (the first
/// is the mean itself) and `K/2` uniform ones, all clipped to the bounds.
/// The mean moves to the `exp(-C/tau)` weighted average of all samples and
/// the standard deviation is annealed by `1 - i/N` after iteration `i`.
pub fn optimize<R, F>(
    cfg: &PlannerConfig,
    init_mean: Vec<Vec3>,
    rng: &mut R,
    mut cost: F,
) -> Result<Optimized>
where
    R: Rng + ?Sized,
    F: FnMut(&[Vec<Vec3>]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let l = cfg.seq_length;
    if init_mean.len() != l {
        return Err(Error::Shape(format!(
            "initial mean has {} steps, expected {l}",
            init_mean.len()
        )));
    }
    let half = cfg.n_samples / 2;
    let mut mu = init_mean;
    let mut sigma = cfg.init_std;
    let mut out = Optimized {
        best_actions: Vec::new(),
        best_cost: f64::INFINITY,
        iteration_costs: Vec::new(),
        best_history: Vec::new(),
        sigma_history: Vec::new(),
        mean_history: Vec::new(),
    };
    for i in 1..=cfg.n_iterations {
        let mut samples: Vec<Vec<Vec3>> = Vec::with_capacity(cfg.n_samples);
        for s in 0..half {
            samples.push(
                mu.iter()
                    .map(|m| {
                        let noisy: Vec3 = if s == 0 {
                            *m
                        } else {
                            std::array::from_fn(|d| {
                                m[d] + sigma * rng.sample::<f64, _>(StandardNormal)
                            })
                        };
                        cfg.clip(noisy)
                    })
                    .collect(),
            );
        }
        for _ in 0..half {
            samples.push(
                (0..l)
                    .map(|_| {
                        std::array::from_fn(|d| {
                            lerp(cfg.action_min[d], cfg.action_max[d], rng.random::<f64>())
                        })
                    })
                    .collect(),
            );
        }
        let task = cost(&samples)?;
        if task.len() != samples.len() {
            return Err(Error::Shape(format!(
                "cost returned {} values for {} samples",
                task.len(),
                samples.len()
            )));
        }
        let costs: Vec<f64> = task
            .iter()
            .zip(&samples)
            .map(|(c, a)| c + cfg.w_smooth * smoothness(a))
            .collect();
        if let Some(bad) = costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::Planning {
                sample: bad,
                source: Box::new(Error::Domain("non-finite cost".into())),
            });
        }
        let (arg, cmin) =
            costs
                .iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |b, (i, c)| if c < b.1 { (i, c) } else { b },
                );
        if cmin < out.best_cost {
            out.best_cost = cmin;
            out.best_actions = samples[arg].clone();
        }
        out.iteration_costs.push(cmin);
        out.best_history.push(out.best_cost);
        out.sigma_history.push(sigma);

        let w: Vec<f64> = costs
            .iter()
            .map(|c| (-(c - cmin) / cfg.temperature).exp())
            .collect();
        let total: f64 = w.iter().sum();
        mu = (0..l)
            .map(|t| {
                let acc = samples.iter().zip(&w).fold([0.0; 3], |acc, (a, wi)| {
                    geometry::add(acc, geometry::scale(a[t], *wi))
                });
                geometry::scale(acc, 1.0 / total)
            })
            .collect();
        out.mean_history.push(mu.clone());
        sigma *= 1.0 - i as f64 / cfg.n_iterations as f64;
    }
    Ok(out)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn displacements(current: &ClothMesh, target: &ClothMesh) -> Result<Vec<f64>> {
    if !current.same_faces(target) {
        return Err(Error::Correspondence(
            "current and target meshes differ in connectivity".into(),
        ));
    }
    Ok(current
        .vertices()
        .iter()
        .zip(target.vertices())
        .map(|(c, t)| geometry::dist(*c, *t))
        .collect())
}

/// `p(i)` proportional to `exp(||s_t^i - s_c^i|| / tau_g)`.
pub fn grasp_probabilities(
    current: &ClothMesh,
    target: &ClothMesh,
    tau_g: f64,
) -> Result<Vec<f64>> {
    if !(tau_g > 0.0) {
        return Err(Error::Config("grasp temperature must be > 0".into()));
    }
    let d = displacements(current, target)?;
    let dmax = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = d.iter().map(|x| ((x - dmax) / tau_g).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

pub fn select_grasp<R: Rng + ?Sized>(
    current: &ClothMesh,
    target: &ClothMesh,
    tau_g: f64,
    rng: &mut R,
) -> Result<usize> {
    let p = grasp_probabilities(current, target, tau_g)?;
    let dist =
        WeightedIndex::new(&p).map_err(|e| Error::Domain(format!("grasp distribution: {e}")))?;
    Ok(dist.sample(rng))
}

/// Direction sum and total weight over the `k` largest displacements.
fn informed(
    current: &ClothMesh,
    target: &ClothMesh,
    grasp: usize,
    k: usize,
    eps: f64,
) -> Result<(Vec3, f64)> {
    let d = displacements(current, target)?;
    let cur = current.vertices();
    if grasp >= cur.len() {
        return Err(Error::Domain(format!("grasp index {grasp} out of range")));
    }
    if k > cur.len() {
        return Err(Error::Domain(format!(
            "informed_k {k} exceeds {} vertices",
            cur.len()
        )));
    }
    let mut order: Vec<usize> = (0..cur.len()).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let pg = cur[grasp];
    let mut dir = [0.0; 3];
    let mut total = 0.0;
    for &i in &order[..k] {
        let w = 1.0 / (geometry::dist(pg, cur[i]) + eps);
        dir = geometry::add(
            dir,
            geometry::scale(geometry::sub(target.vertices()[i], cur[i]), w),
        );
        total += w;
    }
    Ok((dir, total))
}

/// `d_main = sum_i w_i (s_t^i - s_c^i)`, `w_i = 1 / (||p_g - p_i|| + eps)`.
pub fn informed_direction(
    current: &ClothMesh,
    target: &ClothMesh,
    grasp: usize,
    k: usize,
    eps: f64,
) -> Result<Vec3> {
    Ok(informed(current, target, grasp, k, eps)?.0)
}

/// Constant mean along `d_main`. The step length is `init_magnitude`, or
/// less when the weighted mean displacement spread over `L` steps is shorter.
pub fn initial_mean(
    current: &ClothMesh,
    target: &ClothMesh,
    grasp: usize,
    cfg: &PlannerConfig,
) -> Result<Vec<Vec3>> {
    let (dir, total) = informed(current, target, grasp, cfg.informed_k, cfg.epsilon)?;
    let n = geometry::norm(dir);
    let step = if n > 0.0 && total > 0.0 {
        let len = cfg.init_magnitude.min(n / total / cfg.seq_length as f64);
        cfg.clip(geometry::scale(dir, len / n))
    } else {
        [0.0; 3]
    };
    Ok(vec![step; cfg.seq_length])
}

/// `w_mse * MSE + w_cd * CD` between a predicted final state and the target.
pub fn state_cost(pred: &ClothMesh, target: &ClothMesh, cfg: &PlannerConfig) -> Result<f64> {
    Ok(cfg.w_mse * geometry::mse(pred, target)?
        + cfg.w_cd * geometry::chamfer(pred.vertices(), target.vertices())?)
}

/// Point-mass sanity task: the position is the running sum of the actions
/// and the task cost is the squared distance of the final position to `goal`.
#[derive(Debug, Clone)]
pub struct PointMassRun {
    pub final_position: Vec3,
    pub distance: f64,
    /// One optimisation per executed chunk.
    pub chunks: Vec<Optimized>,
}

/// Default planner with the wider per-axis box used by the point-mass task.
pub fn point_mass_config() -> PlannerConfig {
    PlannerConfig {
        action_min: [-0.1; 3],
        action_max: [0.1; 3],
        ..Default::default()
    }
}

/// Plans from the origin, executes each full chunk and replans `chunks` times.
pub fn point_mass_mpc<R: Rng + ?Sized>(
    cfg: &PlannerConfig,
    goal: Vec3,
    chunks: usize,
    rng: &mut R,
) -> Result<PointMassRun> {
    let mut pos = [0.0; 3];
    let mut runs = Vec::with_capacity(chunks);
    for _ in 0..chunks {
        let d = geometry::sub(goal, pos);
        let n = geometry::norm(d);
        let step = if n > 0.0 {
            cfg.clip(geometry::scale(
                d,
                cfg.init_magnitude.min(n / cfg.seq_length as f64) / n,
            ))
        } else {
            [0.0; 3]
        };
        let start = pos;
        let opt = optimize(cfg, vec![step; cfg.seq_length], rng, |cands| {
            Ok(cands
                .iter()
                .map(|a| geometry::dist2(a.iter().fold(start, |p, x| geometry::add(p, *x)), goal))
                .collect())
        })?;
        pos = opt
            .best_actions
            .iter()
            .fold(pos, |p, x| geometry::add(p, *x));
        runs.push(opt);
    }
    Ok(PointMassRun {
        final_position: pos,
        distance: geometry::dist2(pos, goal).sqrt(),
        chunks: runs,
    })
}

/// Transition model used to score candidate action chunks.
pub trait Dynamics {
    /// Frames of history expected by [`Dynamics::final_states`].
    fn history_len(&self) -> usize;

    /// Final predicted state of each candidate chunk, all using `grasp`.
    fn final_states(
        &mut self,
        history: &[ClothMesh],
        grasp: usize,
        candidates: &[Vec<Vec3>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ClothMesh>>;
}

/// Ground-truth simulator started from rest at the latest frame. After the
/// chunk the gripper opens and the cloth settles for `settle_steps` action
/// periods, as in [`mpc_episode`].
pub struct SimDynamics<'a> {
    pub sim: &'a Simulator,
    pub settle_steps: usize,
}

impl Dynamics for SimDynamics<'_> {
    fn history_len(&self) -> usize {
        1
    }

    fn final_states(
        &mut self,
        history: &[ClothMesh],
        grasp: usize,
        candidates: &[Vec<Vec3>],
        _: &mut ChaCha8Rng,
    ) -> Result<Vec<ClothMesh>> {
        let start = ClothState::at_rest(
            history
                .last()
                .ok_or_else(|| Error::Shape("empty history".into()))?
                .clone(),
        );
        candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let acts: Vec<ActionStep> = c
                    .iter()
                    .map(|&delta| ActionStep {
                        grasp_index: grasp,
                        delta,
                    })
                    .collect();
                let wrap = |e| Error::Planning {
                    sample: i,
                    source: Box::new(e),
                };
                let mut s = self
                    .sim
                    .rollout(&start, &acts)
                    .map_err(wrap)?
                    .pop()
                    .expect("non-empty rollout");
                for _ in 0..self.settle_steps {
                    self.sim.release_step(&mut s).map_err(wrap)?;
                }
                Ok(s.mesh)
            })
            .collect()
    }
}

/// Learned dynamics; one batched call per planner iteration when `L = j`.
pub struct DdmDynamics<'a> {
    pub model: &'a DdmModel,
}

impl Dynamics for DdmDynamics<'_> {
    fn history_len(&self) -> usize {
        self.model.history_len()
    }

    fn final_states(
        &mut self,
        history: &[ClothMesh],
        grasp: usize,
        candidates: &[Vec<Vec3>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ClothMesh>> {
        let j = self.model.future_len();
        let wrap = |sample: usize| {
            move |e: Error| Error::Planning {
                sample,
                source: Box::new(e),
            }
        };
        if candidates.iter().all(|c| c.len() <= j) {
            let batch: Vec<(Vec<Vec3>, Option<usize>)> = candidates
                .iter()
                .map(|c| {
                    let mut d = c.clone();
                    d.resize(j, [0.0; 3]);
                    (d, Some(grasp))
                })
                .collect();
            let preds = self
                .model
                .predict_batch(history, &batch, rng)
                .map_err(wrap(0))?;
            return Ok(preds
                .into_iter()
                .zip(candidates)
                .map(|(mut p, c)| p.swap_remove(c.len() - 1))
                .collect());
        }
        candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let acts: Vec<ActionStep> = c
                    .iter()
                    .map(|&delta| ActionStep {
                        grasp_index: grasp,
                        delta,
                    })
                    .collect();
                let mut r = self.model.rollout(history, &acts, rng).map_err(wrap(i))?;
                Ok(r.pop().expect("non-empty rollout"))
            })
            .collect()
    }
}

/// Selects a grasp, seeds the mean along the informed direction and
/// optimises one action chunk.
pub fn plan<D: Dynamics + ?Sized>(
    dynamics: &mut D,
    history: &[ClothMesh],
    target: &ClothMesh,
    cfg: &PlannerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlanResult> {
    cfg.validate()?;
    let current = history
        .last()
        .ok_or_else(|| Error::Shape("empty history".into()))?;
    let grasp = select_grasp(current, target, cfg.grasp_temperature, rng)?;
    let mean = initial_mean(current, target, grasp, cfg)?;
    let mut eval_rng = ChaCha8Rng::from_rng(&mut *rng);
    let opt = optimize(cfg, mean, rng, |cands| {
        dynamics
            .final_states(history, grasp, cands, &mut eval_rng)?
            .iter()
            .map(|s| state_cost(s, target, cfg))
            .collect()
    })?;
    Ok(PlanResult {
        grasp_index: grasp,
        best_actions: opt
            .best_actions
            .iter()
            .map(|&delta| ActionStep {
                grasp_index: grasp,
                delta,
            })
            .collect(),
        best_cost: opt.best_cost,
        cost_history: opt.iteration_costs,
        best_history: opt.best_history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// MPC replans; each executes one full chunk.
    pub max_steps: usize,
    /// Gripper-open action periods after every chunk before observing.
    pub settle_steps: usize,
    /// Success once EMD falls below this fraction of the initial EMD.
    pub success_fraction: f64,
    pub render: RenderConfig,
    pub augment: AugmentParams,
    /// Best-of-n state estimates per observation.
    pub dpm_samples: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 20,
            settle_steps: 8,
            success_fraction: 0.2,
            render: RenderConfig::default(),
            augment: AugmentParams::none(),
            dpm_samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// True-state EMD to the target before the first step and after each.
    pub emd: Vec<f64>,
    pub actions: Vec<ActionStep>,
    pub success: bool,
    /// First MPC step whose EMD met the threshold.
    pub success_step: Option<usize>,
}

/// Where the controller gets its state from.
pub enum StateSource<'a> {
    Oracle,
    Dpm(&'a DpmModel),
}

fn record(
    ep: &mut Episode,
    state: &ClothState,
    target: &ClothMesh,
    threshold: f64,
) -> Result<bool> {
    let e = geometry::emd(state.mesh.vertices(), target.vertices())?;
    ep.emd.push(e);
    let done = e < threshold;
    if done && ep.success_step.is_none() {
        ep.success = true;
        ep.success_step = Some(ep.emd.len() - 1);
    }
    Ok(done)
}

fn settle(sim: &Simulator, state: &mut ClothState, n: usize) -> Result<()> {
    for _ in 0..n {
        sim.release_step(state)?;
    }
    Ok(())
}

/// Observe, estimate, plan and execute one chunk in the simulator, until the
/// EMD threshold or `max_steps`.
pub fn mpc_episode<D: Dynamics + ?Sized>(
    sim: &Simulator,
    dynamics: &mut D,
    source: &StateSource<'_>,
    initial: &ClothState,
    target: &ClothMesh,
    cfg: &PlannerConfig,
    ecfg: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let mut state = initial.clone();
    let mut ep = Episode {
        emd: Vec::new(),
        actions: Vec::new(),
        success: false,
        success_step: None,
    };
    let e0 = geometry::emd(state.mesh.vertices(), target.vertices())?;
    let threshold = ecfg.success_fraction * e0;
    if record(&mut ep, &state, target, threshold)? || e0 == 0.0 {
        ep.success = true;
        ep.success_step = Some(0);
        return Ok(ep);
    }
    for _ in 0..ecfg.max_steps {
        let estimate = match source {
            StateSource::Oracle => state.mesh.clone(),
            StateSource::Dpm(m) => {
                let cloud = observe(&state.mesh, &ecfg.render, &ecfg.augment, rng)?;
                m.estimate(&m.canonical, &cloud, rng, ecfg.dpm_samples.max(1))?
            }
        };
        // Observations follow a settle, so the cloth is treated as at rest.
        let history = vec![estimate; dynamics.history_len()];
        let plan = plan(dynamics, &history, target, cfg, rng)?;
        for a in &plan.best_actions {
            sim.execute(&mut state, a)?;
            ep.actions.push(*a);
        }
        settle(sim, &mut state, ecfg.settle_steps)?;
        if record(&mut ep, &state, target, threshold)? {
            break;
        }
    }
    Ok(ep)
}

/// Uniformly random grasps and in-bounds actions with the same budget.
pub fn random_episode(
    sim: &Simulator,
    initial: &ClothState,
    target: &ClothMesh,
    cfg: &PlannerConfig,
    ecfg: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    cfg.validate()?;
    let mut state = initial.clone();
    let mut ep = Episode {
        emd: Vec::new(),
        actions: Vec::new(),
        success: false,
        success_step: None,
    };
    let threshold =
        ecfg.success_fraction * geometry::emd(state.mesh.vertices(), target.vertices())?;
    if record(&mut ep, &state, target, threshold)? {
        return Ok(ep);
    }
    for _ in 0..ecfg.max_steps {
        let g = rng.random_range(0..state.mesh.n_vertices());
        for _ in 0..cfg.seq_length {
            let delta = std::array::from_fn(|d| {
                lerp(cfg.action_min[d], cfg.action_max[d], rng.random::<f64>())
            });
            let a = ActionStep {
                grasp_index: g,
                delta,
            };
            sim.execute(&mut state, &a)?;
            ep.actions.push(a);
        }
        settle(sim, &mut state, ecfg.settle_steps)?;
        if record(&mut ep, &state, target, threshold)? {
            break;
        }
    }
    Ok(ep)
}

const FOLD_SETTLE_STEPS: usize = 20;

/// Flat settled cloth and the state after folding corner 0 onto the
/// opposite corner and releasing. The gripper follows an arc of 0.05 m
/// chords whose length is 1.3 times the corner distance.
pub fn diagonal_fold_task(
    sim: &Simulator,
    canonical: &ClothMesh,
) -> Result<(ClothState, ClothMesh)> {
    const STEP: f64 = 0.05;
    let initial = crate::pipeline::initial_state(sim, canonical)?;
    let last = initial.mesh.n_vertices() - 1;
    let chord = geometry::dist(initial.mesh.vertices()[0], initial.mesh.vertices()[last]);
    let n = (1.3 * chord / STEP).ceil() as usize;
    let actions = crate::clothsim::fold_actions(&initial.mesh, 0, last, n, STEP)?;
    let mut s = initial.clone();
    for a in &actions {
        sim.execute(&mut s, a)?;
    }
    for _ in 0..FOLD_SETTLE_STEPS {
        sim.release_step(&mut s)?;
    }
    Ok((initial, s.mesh))
}
