//! Diffusion perception model: full mesh state from a partial point cloud,
//! conditioned on the canonical template.
//!
//! Everything the network sees lives in a normalised frame centred on the
//! observation centroid and scaled by half the canonical diagonal, so a rigid
//! translation of the scene leaves the network input unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::geometry::{self, chamfer, ClothMesh, PointCloud, Vec3};
use crate::neural::{
    Graph, Init, Linear, ParamStore, PatchEncoder, Tensor, TransformerConfig, Var,
};
use crate::observation::tokenize_cloud;
use crate::patchnet::{MeshPatchNet, PatchConfig, StepConditioner};
use crate::training::{self, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpmConfig {
    pub transformer: TransformerConfig,
    pub patches: PatchConfig,
    pub cloud_groups: usize,
    pub cloud_group_size: usize,
    /// Neighbourhood radius in normalised units.
    pub cloud_radius: f64,
    pub cloud_hidden: usize,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
}

impl Default for DpmConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            patches: PatchConfig::default(),
            cloud_groups: 32,
            cloud_group_size: 16,
            cloud_radius: 0.4,
            cloud_hidden: 32,
            schedule: ScheduleConfig::default(),
            init_seed: 0,
        }
    }
}

/// Centre and scale of the normalised frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub center: Vec3,
    pub scale: f64,
}

impl Frame {
    pub fn to_norm(&self, p: Vec3) -> Vec3 {
        geometry::scale(geometry::sub(p, self.center), 1.0 / self.scale)
    }

    pub fn from_norm(&self, p: Vec3) -> Vec3 {
        geometry::add(geometry::scale(p, self.scale), self.center)
    }
}

/// Half the canonical diagonal; the fixed scene scale.
pub fn scene_scale(canonical: &ClothMesh) -> f64 {
    0.5 * canonical.diagonal()
}

/// Normalised canonical coordinates plus their offset to the owning patch
/// centre, `[Nv, 6]` flattened.
pub(crate) fn canonical_features(canonical: &ClothMesh, net: &MeshPatchNet) -> Vec<f64> {
    let frame = Frame {
        center: geometry::centroid(canonical.vertices()),
        scale: scene_scale(canonical),
    };
    let p = net.patches();
    let boost = (p.n_patches() as f64).sqrt();
    let mut out = Vec::with_capacity(canonical.n_vertices() * 6);
    for (i, &v) in canonical.vertices().iter().enumerate() {
        let c = frame.to_norm(v);
        let rel = geometry::scale(
            geometry::sub(c, frame.to_norm(p.centers[p.assignment[i]])),
            boost,
        );
        out.extend_from_slice(&c);
        out.extend_from_slice(&rel);
    }
    out
}

/// Tokenised conditioning cloud in the normalised frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudTokens {
    /// `[M, S, 3]` group members relative to their centre, divided by the radius.
    pub rel: Vec<f64>,
    /// `[M, 3]` group centres.
    pub centers: Vec<f64>,
}

/// Network definition; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DpmNet {
    pub backbone: MeshPatchNet,
    pub cloud_enc: PatchEncoder,
    pub center_emb: Linear,
    pub cond: StepConditioner,
    canon_feats: Vec<f64>,
    groups: usize,
    group_size: usize,
}

impl DpmNet {
    /// Predicted noise `[B, Nv, 3]` for `noisy: [B, Nv, 3]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        noisy: Var,
        ks: &[usize],
        tokens: &[&CloudTokens],
    ) -> Result<Var> {
        let s = g.shape(noisy).to_vec();
        let nv = self.backbone.n_vertices();
        if s != [ks.len(), nv, 3] || tokens.len() != ks.len() {
            return Err(Error::Shape(format!(
                "noisy state {s:?} for {} steps and {} clouds",
                ks.len(),
                tokens.len()
            )));
        }
        let b = ks.len();
        let (m, sz) = (self.groups, self.group_size);
        let mut rel = Vec::with_capacity(b * m * sz * 3);
        let mut cen = Vec::with_capacity(b * m * 3);
        for t in tokens {
            if t.rel.len() != m * sz * 3 || t.centers.len() != m * 3 {
                return Err(Error::Shape(
                    "cloud tokens do not match the model's grouping".into(),
                ));
            }
            rel.extend_from_slice(&t.rel);
            cen.extend_from_slice(&t.centers);
        }
        let rel = g.input(Tensor::new(&[b, m, sz, 3], rel)?);
        let cen = g.input(Tensor::new(&[b, m, 3], cen)?);
        let enc = self.cloud_enc.forward(g, rel)?;
        let pe = self.center_emb.forward(g, cen)?;
        let ctx = g.add(enc, pe)?;
        let pooled = g.mean_axis(ctx, 1)?;
        let cond = self.cond.forward(g, ks, pooled)?;

        let canon = g.input(Tensor::new(&[b, 1, nv, 6], self.canon_feats.repeat(b))?);
        let x = g.reshape(noisy, &[b, 1, nv, 3])?;
        let feats = g.concat(&[x, canon], 3)?;
        let out = self.backbone.forward(g, feats, cond, ctx, 0)?;
        g.reshape(out, &[b, nv, 3])
    }
}

#[derive(Debug, Clone)]
pub struct DpmModel {
    pub config: DpmConfig,
    pub canonical: ClothMesh,
    pub schedule: NoiseSchedule,
    pub net: DpmNet,
    pub store: ParamStore,
}

/// One supervised pair: an observed cloud and the true mesh state.
#[derive(Debug, Clone)]
pub struct PerceptionSample {
    pub cloud: PointCloud,
    pub mesh: ClothMesh,
}

impl DpmModel {
    pub fn new(canonical: &ClothMesh, config: DpmConfig) -> Result<Self> {
        let t = &config.transformer;
        t.validate()?;
        if config.cloud_groups == 0 || config.cloud_group_size == 0 || !(config.cloud_radius > 0.0)
        {
            return Err(Error::Config(
                "cloud grouping sizes and radius must be positive".into(),
            ));
        }
        let schedule = NoiseSchedule::try_from(config.schedule)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let backbone = MeshPatchNet::new(&mut init, "dpm", canonical, &config.patches, t, 9, None)?;
        let dx = t.cross_attn_dim;
        let cloud_enc = PatchEncoder::new(&mut init, "dpm.cloud", 3, config.cloud_hidden, dx)?;
        let center_emb = Linear::new(&mut init, "dpm.cloud_pos", 3, dx)?;
        let cond = StepConditioner::new(&mut init, "dpm.cond", dx, t.cond_dim)?;
        let canon_feats = canonical_features(canonical, &backbone);
        let net = DpmNet {
            backbone,
            cloud_enc,
            center_emb,
            cond,
            canon_feats,
            groups: config.cloud_groups,
            group_size: config.cloud_group_size,
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

    /// Normalised frame for an observation.
    pub fn frame(&self, cloud: &PointCloud) -> Frame {
        Frame {
            center: geometry::centroid(cloud.points()),
            scale: scene_scale(&self.canonical),
        }
    }

    /// Normalises and groups a cloud. The FPS start point is drawn from `rng`.
    pub fn prepare<R: Rng + ?Sized>(
        &self,
        cloud: &PointCloud,
        rng: &mut R,
    ) -> Result<(Frame, CloudTokens)> {
        let frame = self.frame(cloud);
        let pts: Vec<Vec3> = cloud.points().iter().map(|&p| frame.to_norm(p)).collect();
        let c = &self.config;
        let ps = tokenize_cloud(
            &PointCloud::new(pts.clone())?,
            c.cloud_groups,
            c.cloud_group_size,
            c.cloud_radius,
            rng,
        )?;
        let mut rel = Vec::with_capacity(c.cloud_groups * c.cloud_group_size * 3);
        let mut centers = Vec::with_capacity(c.cloud_groups * 3);
        for (gi, grp) in ps.groups.iter().enumerate() {
            let ctr = ps.centers[gi];
            centers.extend_from_slice(&ctr);
            for &i in grp {
                rel.extend_from_slice(&geometry::scale(
                    geometry::sub(pts[i], ctr),
                    1.0 / c.cloud_radius,
                ));
            }
        }
        Ok((frame, CloudTokens { rel, centers }))
    }

    fn check_canonical(&self, canonical: &ClothMesh) -> Result<()> {
        if !canonical.same_faces(&self.canonical) {
            return Err(Error::Correspondence(
                "canonical mesh differs from the model's template".into(),
            ));
        }
        Ok(())
    }

    /// Noise prediction for a single normalised noisy state `[Nv, 3]`.
    /// Cloud grouping uses a fixed FPS seed, so the result is deterministic.
    pub fn denoise(
        &self,
        noisy: &Tensor,
        k: usize,
        canonical: &ClothMesh,
        cloud: &PointCloud,
    ) -> Result<Tensor> {
        self.check_canonical(canonical)?;
        if k == 0 || k > self.schedule.steps() {
            return Err(Error::Domain(format!(
                "diffusion step {k} outside 1..={}",
                self.schedule.steps()
            )));
        }
        let (_, tokens) = self.prepare(cloud, &mut ChaCha8Rng::seed_from_u64(0))?;
        let nv = self.n_vertices();
        let x = noisy.clone().reshaped(&[1, nv, 3])?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(x);
        let y = self.net.forward(&mut g, xv, &[k], &[&tokens])?;
        g.value(y).clone().reshaped(&[nv, 3])
    }

    /// Samples `n_samples` states and returns the one closest (Chamfer) to
    /// the observation.
    pub fn estimate<R: Rng + ?Sized>(
        &self,
        canonical: &ClothMesh,
        cloud: &PointCloud,
        rng: &mut R,
        n_samples: usize,
    ) -> Result<ClothMesh> {
        self.check_canonical(canonical)?;
        let n = n_samples.max(1);
        let (frame, tokens) = self.prepare(cloud, rng)?;
        let nv = self.n_vertices();
        let toks: Vec<&CloudTokens> = vec![&tokens; n];
        let out = diffusion::sample(&[n, nv, 3], &self.schedule, rng, true, |x, k| {
            let mut g = Graph::new(&self.store);
            let xv = g.input(x.clone());
            let y = self.net.forward(&mut g, xv, &vec![k; n], &toks)?;
            Ok(g.value(y).clone())
        })?;
        let mut best: Option<(f64, ClothMesh)> = None;
        for s in 0..n {
            let verts: Vec<Vec3> = out.data()[s * nv * 3..(s + 1) * nv * 3]
                .chunks_exact(3)
                .map(|c| frame.from_norm([c[0], c[1], c[2]]))
                .collect();
            let mesh = self.canonical.with_vertices(verts)?;
            let cd = chamfer(mesh.vertices(), cloud.points())?;
            if best.as_ref().is_none_or(|(b, _)| cd < *b) {
                best = Some((cd, mesh));
            }
        }
        Ok(best.expect("at least one sample").1)
    }

    /// Target `[Nv, 3]` in the frame of the sample's observation.
    fn target(&self, frame: &Frame, mesh: &ClothMesh) -> Result<Vec<f64>> {
        if mesh.n_vertices() != self.n_vertices() {
            return Err(Error::Correspondence(format!(
                "mesh has {} vertices, model expects {}",
                mesh.n_vertices(),
                self.n_vertices()
            )));
        }
        Ok(mesh
            .vertices()
            .iter()
            .flat_map(|&v| frame.to_norm(v))
            .collect())
    }

    /// Loss on a batch with explicit steps and noise; used for validation.
    pub fn loss_with(
        &self,
        store: &ParamStore,
        batch: &[&PerceptionSample],
        ks: &[usize],
        eps: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let (s0, tokens) = self.batch(batch, rng)?;
        let mut g = Graph::new(store);
        let toks: Vec<&CloudTokens> = tokens.iter().collect();
        let l = diffusion::training_loss_with(&mut g, &s0, ks, eps, &self.schedule, |g, x, ks| {
            self.net.forward(g, x, ks, &toks)
        })?;
        Ok(g.value(l).item())
    }

    fn batch(
        &self,
        samples: &[&PerceptionSample],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Vec<CloudTokens>)> {
        let nv = self.n_vertices();
        let mut s0 = Vec::with_capacity(samples.len() * nv * 3);
        let mut tokens = Vec::with_capacity(samples.len());
        for s in samples {
            let (frame, t) = self.prepare(&s.cloud, rng)?;
            s0.extend(self.target(&frame, &s.mesh)?);
            tokens.push(t);
        }
        Ok((Tensor::new(&[samples.len(), nv, 3], s0)?, tokens))
    }

    /// Mean denoising loss over `data` with steps and noise fixed by `seed`.
    pub fn validation_loss(&self, data: &[PerceptionSample], seed: u64) -> Result<f64> {
        validation_loss_impl(self, data, seed)
    }

    /// As [`Self::validation_loss`] but pairs each mesh with the cloud of
    /// another sample.
    pub fn shuffled_condition_loss(&self, data: &[PerceptionSample], seed: u64) -> Result<f64> {
        let n = data.len();
        let shuffled: Vec<PerceptionSample> = (0..n)
            .map(|i| PerceptionSample {
                cloud: data[(i + 1) % n].cloud.clone(),
                mesh: data[i].mesh.clone(),
            })
            .collect();
        validation_loss_impl(self, &shuffled, seed)
    }
}

fn validation_loss_impl(m: &DpmModel, data: &[PerceptionSample], seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = m.n_vertices();
    let mut total = 0.0;
    for chunk in data.chunks(16) {
        let ks: Vec<usize> = chunk
            .iter()
            .map(|_| rng.random_range(1..=m.schedule.steps()))
            .collect();
        let eps = Tensor::randn(&[chunk.len(), nv, 3], &mut rng);
        let refs: Vec<&PerceptionSample> = chunk.iter().collect();
        total += m.loss_with(&m.store, &refs, &ks, &eps, &mut rng)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains the model in place on `(cloud, mesh)` pairs.
pub fn train_dpm(
    model: &mut DpmModel,
    data: &[PerceptionSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("perception training set is empty".into()));
    }
    let (this, mut store) = split(model);
    let report = training::run(&mut store, cfg, |store, _, rng| {
        let batch: Vec<&PerceptionSample> = (0..cfg.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let (s0, tokens) = this.batch(&batch, rng)?;
        let toks: Vec<&CloudTokens> = tokens.iter().collect();
        let mut g = Graph::new(store);
        let l = diffusion::training_loss(&mut g, &s0, &this.schedule, rng, |g, x, ks| {
            this.net.forward(g, x, ks, &toks)
        })?;
        let grads = g.backward(l)?;
        Ok((g.value(l).item(), grads.params()))
    });
    model.store = store;
    report
}

/// Detaches the parameters so the definition can be borrowed alongside a
/// mutable store.
fn split(model: &mut DpmModel) -> (DpmModel, ParamStore) {
    let store = std::mem::take(&mut model.store);
    (
        DpmModel {
            store: ParamStore::new(),
            ..model.clone()
        },
        store,
    )
}

/// MSE of the canonical template used directly as the prediction.
pub fn template_baseline_mse(canonical: &ClothMesh, truth: &ClothMesh) -> Result<f64> {
    geometry::mse(canonical, truth)
}
