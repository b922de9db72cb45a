//! Diffusion dynamics model: `j` future frames from `i + 1` history frames,
//! per-frame action deltas and a grasp mask, plus chunked autoregressive
//! rollout.
//!
//! The network denoises future displacements relative to the last history
//! frame, divided by `disp_scale`. History frames enter as clean tokens.
//! Per-vertex channels: displacement, normalised position, canonical
//! features, grasp mask, future flag and the cumulative gripper displacement
//! of that frame (zero for history frames).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clothsim::ActionStep;
use crate::diffusion::{self, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::geometry::{self, ClothMesh, Vec3};
use crate::neural::{
    FourierActionEmbedder, Graph, Init, ParamId, ParamStore, Tensor, TransformerConfig, Var,
};
use crate::patchnet::{MeshPatchNet, PatchConfig, StepConditioner};
use crate::perception::{canonical_features, scene_scale, Frame};
use crate::training::{self, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdmConfig {
    pub transformer: TransformerConfig,
    pub patches: PatchConfig,
    /// `i`: history frames before the current one.
    pub history: usize,
    /// `j`: predicted frames per call.
    pub future: usize,
    /// Metres per unit of the denoised displacement.
    pub disp_scale: f64,
    /// Metres per unit of the embedded action deltas.
    pub action_scale: f64,
    pub n_frequencies: usize,
    pub action_hidden: Vec<usize>,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
}

impl Default for DdmConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig {
                n_heads: 4,
                head_dim: 8,
                inner_dim: 32,
                cross_attn_dim: 32,
                cond_dim: 32,
                ..TransformerConfig::default()
            },
            patches: PatchConfig {
                n_patches: 8,
                decode_k: 3,
                seed: 0,
            },
            history: 3,
            future: 5,
            disp_scale: 0.1,
            action_scale: 0.05,
            n_frequencies: 8,
            action_hidden: vec![64],
            schedule: ScheduleConfig {
                steps: 50,
                beta_start: 2e-3,
                beta_end: 0.4,
            },
            init_seed: 0,
        }
    }
}

const CHANNELS: usize = 17;

/// A training window cut from a trajectory.
#[derive(Debug, Clone)]
pub struct Transition {
    /// `i + 1` frames ending with the current state.
    pub history: Vec<ClothMesh>,
    /// One delta per future frame.
    pub deltas: Vec<Vec3>,
    pub grasp_index: Option<usize>,
    pub future: Vec<ClothMesh>,
}

impl Transition {
    pub fn grasp_mask(&self, n_vertices: usize) -> Vec<f64> {
        grasp_mask(self.grasp_index, n_vertices)
    }
}

pub fn grasp_mask(grasp: Option<usize>, n_vertices: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_vertices];
    if let Some(g) = grasp {
        m[g] = 1.0;
    }
    m
}

/// States `s_0..s_L` and the `L` actions between them.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<ClothMesh>,
    pub actions: Vec<ActionStep>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 || self.states.is_empty() {
            return Err(Error::Shape(format!(
                "trajectory has {} states for {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        let first = &self.states[0];
        if self.states.iter().any(|s| !s.same_connectivity(first)) {
            return Err(Error::Correspondence(
                "trajectory frames differ in connectivity".into(),
            ));
        }
        Ok(())
    }

    /// History of `history + 1` frames ending at step `t`, front-padded with
    /// the initial state.
    pub fn history_at(&self, t: usize, history: usize) -> Vec<ClothMesh> {
        (0..=history)
            .map(|h| self.states[(t + h).saturating_sub(history)].clone())
            .collect()
    }

    /// Every window whose `future` actions share one grasp vertex.
    pub fn transitions(&self, history: usize, future: usize) -> Result<Vec<Transition>> {
        self.validate()?;
        let l = self.actions.len();
        let mut out = Vec::new();
        for t in 0..(l + 1).saturating_sub(future) {
            let acts = &self.actions[t..t + future];
            if acts.iter().any(|a| a.grasp_index != acts[0].grasp_index) {
                continue;
            }
            out.push(Transition {
                history: self.history_at(t, history),
                deltas: acts.iter().map(|a| a.delta).collect(),
                grasp_index: Some(acts[0].grasp_index),
                future: self.states[t + 1..=t + future].to_vec(),
            });
        }
        Ok(out)
    }
}

/// Constant per-sample inputs in the normalised frame.
#[derive(Debug, Clone)]
pub struct Conditioning {
    last: Vec<Vec3>,
    /// `[i + 1, Nv, 17]`
    history: Vec<f64>,
    /// `[j, Nv, 14]`
    future: Vec<f64>,
    /// `[j, 3]`
    actions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DdmNet {
    pub backbone: MeshPatchNet,
    pub actions: FourierActionEmbedder,
    pub action_index: ParamId,
    pub cond: StepConditioner,
    canon_feats: Vec<f64>,
    history: usize,
    future: usize,
}

impl DdmNet {
    /// Predicted noise `[B, j, Nv, 3]` for noisy displacements of the same shape.
    pub fn forward(
        &self,
        g: &mut Graph,
        noisy: Var,
        ks: &[usize],
        conds: &[&Conditioning],
    ) -> Result<Var> {
        let nv = self.backbone.n_vertices();
        let (h, j) = (self.history + 1, self.future);
        let b = ks.len();
        if g.shape(noisy) != [b, j, nv, 3] || conds.len() != b {
            return Err(Error::Shape(format!(
                "noisy future {:?} for batch {b} and {} conditions",
                g.shape(noisy),
                conds.len()
            )));
        }
        let mut hist = Vec::with_capacity(b * h * nv * CHANNELS);
        let mut fut = Vec::with_capacity(b * j * nv * (CHANNELS - 3));
        let mut acts = Vec::with_capacity(b * j * 3);
        for c in conds {
            if c.history.len() != h * nv * CHANNELS || c.actions.len() != j * 3 {
                return Err(Error::Shape(
                    "conditioning does not match the model's frame counts".into(),
                ));
            }
            hist.extend_from_slice(&c.history);
            fut.extend_from_slice(&c.future);
            acts.extend_from_slice(&c.actions);
        }
        let acts = g.input(Tensor::new(&[b, j, 3], acts)?);
        let tokens = self.actions.forward(g, acts)?;
        let idx = g.param(self.action_index);
        let ctx = g.add(tokens, idx)?;
        let pooled = g.mean_axis(ctx, 1)?;
        let cond = self.cond.forward(g, ks, pooled)?;

        let hist = g.input(Tensor::new(&[b, h, nv, CHANNELS], hist)?);
        let fut = g.input(Tensor::new(&[b, j, nv, CHANNELS - 3], fut)?);
        let fut = g.concat(&[noisy, fut], 3)?;
        let feats = g.concat(&[hist, fut], 1)?;
        self.backbone.forward(g, feats, cond, ctx, h)
    }
}

#[derive(Debug, Clone)]
pub struct DdmModel {
    pub config: DdmConfig,
    pub canonical: ClothMesh,
    pub schedule: NoiseSchedule,
    pub net: DdmNet,
    pub store: ParamStore,
}

impl DdmModel {
    pub fn new(canonical: &ClothMesh, config: DdmConfig) -> Result<Self> {
        let t = &config.transformer;
        t.validate()?;
        if config.future == 0 || !(config.disp_scale > 0.0) || !(config.action_scale > 0.0) {
            return Err(Error::Config(
                "future frames and scales must be positive".into(),
            ));
        }
        let schedule = NoiseSchedule::try_from(config.schedule)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let frames = config.history + 1 + config.future;
        let backbone = MeshPatchNet::new(
            &mut init,
            "ddm",
            canonical,
            &config.patches,
            t,
            CHANNELS,
            Some(frames),
        )?;
        let dx = t.cross_attn_dim;
        let actions = FourierActionEmbedder::new(
            &mut init,
            "ddm.action",
            config.n_frequencies,
            &config.action_hidden,
            dx,
        )?;
        let action_index = init.normal("ddm.action_index", &[config.future, dx], 0.02)?;
        let cond = StepConditioner::new(&mut init, "ddm.cond", dx, t.cond_dim)?;
        let canon_feats = canonical_features(canonical, &backbone);
        let net = DdmNet {
            backbone,
            actions,
            action_index,
            cond,
            canon_feats,
            history: config.history,
            future: config.future,
        };
        Ok(Self {
            config,
            canonical: canonical.clone(),
            schedule,
            net,
            store,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.canonical.n_vertices()
    }

    pub fn history_len(&self) -> usize {
        self.config.history + 1
    }

    pub fn future_len(&self) -> usize {
        self.config.future
    }

    /// Builds the normalised network inputs for one window.
    pub fn condition(
        &self,
        history: &[ClothMesh],
        deltas: &[Vec3],
        grasp: Option<usize>,
    ) -> Result<Conditioning> {
        let nv = self.n_vertices();
        if history.len() != self.history_len() || deltas.len() != self.future_len() {
            return Err(Error::Shape(format!(
                "expected {} history frames and {} deltas, got {} and {}",
                self.history_len(),
                self.future_len(),
                history.len(),
                deltas.len()
            )));
        }
        if history.iter().any(|m| !m.same_faces(&self.canonical)) {
            return Err(Error::Correspondence(
                "history frame differs from the template".into(),
            ));
        }
        if grasp.is_some_and(|g| g >= nv) {
            return Err(Error::Domain(format!(
                "grasp vertex out of range for {nv} vertices"
            )));
        }
        let last = history[history.len() - 1].vertices().to_vec();
        let frame = Frame {
            center: geometry::centroid(&last),
            scale: scene_scale(&self.canonical),
        };
        let mask = grasp_mask(grasp, nv);
        let ds = self.config.disp_scale;
        let mut hist = Vec::with_capacity(history.len() * nv * CHANNELS);
        for m in history {
            for (v, &p) in m.vertices().iter().enumerate() {
                hist.extend(geometry::scale(geometry::sub(p, last[v]), 1.0 / ds));
                hist.extend(frame.to_norm(p));
                hist.extend_from_slice(&self.net.canon_feats[v * 6..v * 6 + 6]);
                hist.push(mask[v]);
                hist.extend([0.0; 4]);
            }
        }
        let mut fut = Vec::with_capacity(self.future_len() * nv * (CHANNELS - 3));
        let mut gripper = [0.0; 3];
        for d in deltas {
            gripper = geometry::add(gripper, geometry::scale(*d, 1.0 / ds));
            for (v, &p) in last.iter().enumerate() {
                fut.extend(frame.to_norm(p));
                fut.extend_from_slice(&self.net.canon_feats[v * 6..v * 6 + 6]);
                fut.push(mask[v]);
                fut.push(1.0);
                fut.extend(gripper);
            }
        }
        let actions = deltas
            .iter()
            .flat_map(|d| geometry::scale(*d, 1.0 / self.config.action_scale))
            .collect();
        Ok(Conditioning {
            last,
            history: hist,
            future: fut,
            actions,
        })
    }

    fn target(&self, c: &Conditioning, future: &[ClothMesh]) -> Result<Vec<f64>> {
        if future.len() != self.future_len()
            || future.iter().any(|m| !m.same_faces(&self.canonical))
        {
            return Err(Error::Shape("future frames do not match the model".into()));
        }
        let ds = self.config.disp_scale;
        Ok(future
            .iter()
            .flat_map(|m| {
                m.vertices()
                    .iter()
                    .zip(&c.last)
                    .flat_map(move |(&p, &l)| geometry::scale(geometry::sub(p, l), 1.0 / ds))
            })
            .collect())
    }

    /// Noise prediction `[j, Nv, 3]` for one window.
    pub fn denoise(
        &self,
        noisy_future: &Tensor,
        k: usize,
        history: &[ClothMesh],
        deltas: &[Vec3],
        grasp: Option<usize>,
    ) -> Result<Tensor> {
        if k == 0 || k > self.schedule.steps() {
            return Err(Error::Domain(format!(
                "diffusion step {k} outside 1..={}",
                self.schedule.steps()
            )));
        }
        let c = self.condition(history, deltas, grasp)?;
        let (j, nv) = (self.future_len(), self.n_vertices());
        let x = noisy_future.clone().reshaped(&[1, j, nv, 3])?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(x);
        let y = self.net.forward(&mut g, xv, &[k], &[&c])?;
        g.value(y).clone().reshaped(&[j, nv, 3])
    }

    /// Samples future frames for several action hypotheses from one history.
    pub fn predict_batch<R: Rng + ?Sized>(
        &self,
        history: &[ClothMesh],
        candidates: &[(Vec<Vec3>, Option<usize>)],
        rng: &mut R,
    ) -> Result<Vec<Vec<ClothMesh>>> {
        let conds = candidates
            .iter()
            .map(|(d, gi)| self.condition(history, d, *gi))
            .collect::<Result<Vec<_>>>()?;
        self.sample_conditions(&conds, rng)
    }

    fn sample_conditions<R: Rng + ?Sized>(
        &self,
        conds: &[Conditioning],
        rng: &mut R,
    ) -> Result<Vec<Vec<ClothMesh>>> {
        let b = conds.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let (j, nv) = (self.future_len(), self.n_vertices());
        let refs: Vec<&Conditioning> = conds.iter().collect();
        let out = diffusion::sample(&[b, j, nv, 3], &self.schedule, rng, true, |x, k| {
            let mut g = Graph::new(&self.store);
            let xv = g.input(x.clone());
            let y = self.net.forward(&mut g, xv, &vec![k; b], &refs)?;
            Ok(g.value(y).clone())
        })?;
        let ds = self.config.disp_scale;
        let d = out.data();
        let mut result = Vec::with_capacity(b);
        for (bi, c) in conds.iter().enumerate() {
            let mut frames = Vec::with_capacity(j);
            for f in 0..j {
                let base = (bi * j + f) * nv * 3;
                let verts = (0..nv)
                    .map(|v| {
                        let o = base + v * 3;
                        geometry::add(c.last[v], [d[o] * ds, d[o + 1] * ds, d[o + 2] * ds])
                    })
                    .collect();
                frames.push(self.canonical.with_vertices(verts)?);
            }
            result.push(frames);
        }
        Ok(result)
    }

    /// `j` predicted future meshes.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        history: &[ClothMesh],
        deltas: &[Vec3],
        grasp: Option<usize>,
        rng: &mut R,
    ) -> Result<Vec<ClothMesh>> {
        Ok(self
            .predict_batch(history, &[(deltas.to_vec(), grasp)], rng)?
            .remove(0))
    }

    /// One predicted mesh per action. Actions are taken `j` at a time; a
    /// chunk also ends where the grasp vertex changes, and short chunks are
    /// padded with zero deltas whose predictions are discarded. Predicted
    /// frames slide into the history window.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        initial_history: &[ClothMesh],
        actions: &[ActionStep],
        rng: &mut R,
    ) -> Result<Vec<ClothMesh>> {
        if initial_history.len() != self.history_len() {
            return Err(Error::Shape(format!(
                "expected {} history frames",
                self.history_len()
            )));
        }
        let j = self.future_len();
        let mut window: Vec<ClothMesh> = initial_history.to_vec();
        let mut out = Vec::with_capacity(actions.len());
        let mut i = 0;
        while i < actions.len() {
            let g = actions[i].grasp_index;
            let mut n = 0;
            while n < j && i + n < actions.len() && actions[i + n].grasp_index == g {
                n += 1;
            }
            let mut deltas: Vec<Vec3> = actions[i..i + n].iter().map(|a| a.delta).collect();
            deltas.resize(j, [0.0; 3]);
            let pred = self.predict(&window, &deltas, Some(g), rng)?;
            for m in pred.into_iter().take(n) {
                window.remove(0);
                window.push(m.clone());
                out.push(m);
            }
            i += n;
        }
        Ok(out)
    }

    fn batch(&self, items: &[&Transition]) -> Result<(Tensor, Vec<Conditioning>)> {
        let (j, nv) = (self.future_len(), self.n_vertices());
        let mut s0 = Vec::with_capacity(items.len() * j * nv * 3);
        let mut conds = Vec::with_capacity(items.len());
        for t in items {
            let c = self.condition(&t.history, &t.deltas, t.grasp_index)?;
            s0.extend(self.target(&c, &t.future)?);
            conds.push(c);
        }
        Ok((Tensor::new(&[items.len(), j, nv, 3], s0)?, conds))
    }

    /// Mean denoising loss with steps and noise fixed by `seed`.
    pub fn validation_loss(&self, data: &[Transition], seed: u64) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Config("validation set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (j, nv) = (self.future_len(), self.n_vertices());
        let mut total = 0.0;
        for chunk in data.chunks(16) {
            let refs: Vec<&Transition> = chunk.iter().collect();
            let (s0, conds) = self.batch(&refs)?;
            let ks: Vec<usize> = chunk
                .iter()
                .map(|_| rng.random_range(1..=self.schedule.steps()))
                .collect();
            let eps = Tensor::randn(&[chunk.len(), j, nv, 3], &mut rng);
            let mut g = Graph::new(&self.store);
            let cr: Vec<&Conditioning> = conds.iter().collect();
            let l = diffusion::training_loss_with(
                &mut g,
                &s0,
                &ks,
                &eps,
                &self.schedule,
                |g, x, ks| self.net.forward(g, x, ks, &cr),
            )?;
            total += g.value(l).item() * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }
}

/// Trains the model in place on transition windows.
pub fn train_ddm(
    model: &mut DdmModel,
    data: &[Transition],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("dynamics training set is empty".into()));
    }
    let mut store = std::mem::take(&mut model.store);
    let this: &DdmModel = model;
    let report = training::run(&mut store, cfg, |store, _, rng| {
        let items: Vec<&Transition> = (0..cfg.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let (s0, conds) = this.batch(&items)?;
        let cr: Vec<&Conditioning> = conds.iter().collect();
        let mut g = Graph::new(store);
        let l = diffusion::training_loss(&mut g, &s0, &this.schedule, rng, |g, x, ks| {
            this.net.forward(g, x, ks, &cr)
        })?;
        let grads = g.backward(l)?;
        Ok((g.value(l).item(), grads.params()))
    });
    model.store = store;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clothsim::make_grid_cloth;

    pub(crate) fn tiny() -> DdmConfig {
        DdmConfig {
            transformer: TransformerConfig {
                n_heads: 2,
                head_dim: 4,
                inner_dim: 8,
                cross_attn_dim: 8,
                cond_dim: 8,
                n_layers: 1,
                ..Default::default()
            },
            patches: PatchConfig {
                n_patches: 4,
                decode_k: 3,
                seed: 0,
            },
            history: 1,
            future: 2,
            n_frequencies: 2,
            action_hidden: vec![8],
            schedule: ScheduleConfig {
                steps: 4,
                beta_start: 0.01,
                beta_end: 0.3,
            },
            ..Default::default()
        }
    }

    fn traj(n: usize) -> Trajectory {
        let m = make_grid_cloth(4, 4, 0.1, 0.0).unwrap();
        let states = (0..=n)
            .map(|t| {
                m.with_vertices(
                    m.vertices()
                        .iter()
                        .map(|p| [p[0] + 0.01 * t as f64, p[1], p[2]])
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let actions = (0..n)
            .map(|t| ActionStep {
                grasp_index: if t < 4 { 0 } else { 5 },
                delta: [0.01, 0.0, 0.0],
            })
            .collect();
        Trajectory { states, actions }
    }

    #[test]
    fn transitions_respect_windows_and_grasps() {
        let t = traj(6);
        let tr = t.transitions(3, 2).unwrap();
        // windows starting at 0..=4; the one at 3 straddles the grasp switch
        assert_eq!(tr.len(), 4);
        assert_eq!(tr[0].history.len(), 4);
        assert_eq!(tr[0].history[0].vertices(), t.states[0].vertices());
        assert_eq!(tr[0].future[0].vertices(), t.states[1].vertices());
        assert_eq!(tr[3].grasp_index, Some(5));
        let m = tr[0].grasp_mask(16);
        assert_eq!(m.iter().sum::<f64>(), 1.0);
        assert_eq!(m[0], 1.0);
    }

    #[test]
    fn shapes_zero_init_and_padding_rule() {
        let t = traj(6);
        let m = DdmModel::new(&t.states[0], tiny()).unwrap();
        let hist = t.history_at(2, 1);
        let y = m
            .denoise(
                &Tensor::zeros(&[2, 16, 3]),
                2,
                &hist,
                &[[0.01, 0.0, 0.0]; 2],
                Some(3),
            )
            .unwrap();
        assert_eq!(y.shape(), &[2, 16, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let acts: Vec<ActionStep> = (0..3)
            .map(|_| ActionStep {
                grasp_index: 2,
                delta: [0.0, 0.02, 0.0],
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = m.rollout(&hist, &acts, &mut rng).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.same_connectivity(&t.states[0])));
        assert!(m
            .denoise(
                &Tensor::zeros(&[2, 16, 3]),
                2,
                &hist[..1],
                &[[0.0; 3]; 2],
                None
            )
            .is_err());
    }

    #[test]
    fn single_chunk_rollout_equals_predict() {
        let t = traj(6);
        let m = DdmModel::new(&t.states[0], tiny()).unwrap();
        let hist = t.history_at(1, 1);
        let acts: Vec<ActionStep> = (0..2)
            .map(|_| ActionStep {
                grasp_index: 4,
                delta: [0.0, 0.0, 0.02],
            })
            .collect();
        let a = m
            .rollout(&hist, &acts, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = m
            .predict(
                &hist,
                &[[0.0, 0.0, 0.02]; 2],
                Some(4),
                &mut ChaCha8Rng::seed_from_u64(9),
            )
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.vertices(), y.vertices());
        }
    }
}
