//! Mesh-patch transformer backbone shared by the perception and dynamics
//! denoisers.
//!
//! Per-vertex features are lifted by a shared MLP, max-pooled over the
//! canonical Voronoi patches, processed by conditioned transformer blocks,
//! then brought back to vertices by inverse-distance interpolation of the
//! nearest patch tokens. A per-vertex skip feeds the output head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ClothMesh;
use crate::neural::{Activation, Block, Graph, Init, Mlp, ParamId, Tensor, TransformerConfig, Var};
use crate::observation::{interpolate_decode_weights, tokenize_mesh, PatchSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub n_patches: usize,
    /// Patch tokens blended into every vertex on decode.
    pub decode_k: usize,
    /// Seed of the FPS start vertex.
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            n_patches: 16,
            decode_k: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeshPatchNet {
    pub vertex_mlp: Mlp,
    pub patch_pos: ParamId,
    pub blocks: Vec<Block>,
    pub head: Mlp,
    patches: PatchSet,
    group_size: usize,
    group_idx: Arc<[usize]>,
    decode_idx: Arc<[usize]>,
    decode_w: Tensor,
    n_vertices: usize,
    dim: usize,
}

impl MeshPatchNet {
    /// `in_channels` per-vertex features; `max_frames` enables temporal
    /// attention over that many frames.
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        canonical: &ClothMesh,
        patch: &PatchConfig,
        cfg: &TransformerConfig,
        in_channels: usize,
        max_frames: Option<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        let patches = tokenize_mesh(canonical, patch.n_patches, patch.seed)?;
        let group_size = patches.max_group_size();
        let group_idx: Arc<[usize]> = patches.padded_groups(group_size)?.into();
        let dw = interpolate_decode_weights(canonical, &patches, patch.decode_k)?;
        let nv = canonical.n_vertices();
        let decode_w = Tensor::new(&[nv, dw.k, 1], dw.weights)?;
        let d = cfg.inner_dim;
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(init, &format!("{name}.block{i}"), cfg, max_frames))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vertex_mlp: Mlp::new(
                init,
                &format!("{name}.vertex"),
                &[in_channels, d, d],
                cfg.activation,
                false,
            )?,
            patch_pos: init.normal(
                &format!("{name}.patch_pos"),
                &[patches.n_patches(), d],
                0.02,
            )?,
            blocks,
            head: Mlp::new(
                init,
                &format!("{name}.head"),
                &[2 * d, d, 3],
                cfg.activation,
                true,
            )?,
            patches,
            group_size,
            group_idx,
            decode_idx: dw.indices.into(),
            decode_w,
            n_vertices: nv,
            dim: d,
        })
    }

    pub fn patches(&self) -> &PatchSet {
        &self.patches
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    /// `feats: [B, F, Nv, C]`, `cond: [B, Dc]`, `ctx: [B, M, Dx]`. Returns
    /// `[B, F - skip, Nv, 3]` for the frames after the first `skip`.
    pub fn forward(
        &self,
        g: &mut Graph,
        feats: Var,
        cond: Var,
        ctx: Var,
        skip: usize,
    ) -> Result<Var> {
        let s = g.shape(feats).to_vec();
        if s.len() != 4 || s[2] != self.n_vertices || skip >= s[1] {
            return Err(Error::Shape(format!(
                "backbone input {s:?} (expected [B, F, {}, C] with more than {skip} frames)",
                self.n_vertices
            )));
        }
        let (b, f, nv, d) = (s[0], s[1], s[2], self.dim);
        let p = self.patches.n_patches();
        let h = self.vertex_mlp.forward(g, feats)?;
        let grouped = g.gather(h, 2, self.group_idx.clone())?;
        let grouped = g.reshape(grouped, &[b, f, p, self.group_size, d])?;
        let tokens = g.max_axis(grouped, 3)?;
        let pos = g.param(self.patch_pos);
        let mut x = g.add(tokens, pos)?;
        for blk in &self.blocks {
            x = blk.forward(g, x, cond, ctx)?;
        }
        let x = g.layer_norm(x)?;
        let (x, h) = if skip > 0 {
            (g.slice(x, 1, skip, f)?, g.slice(h, 1, skip, f)?)
        } else {
            (x, h)
        };
        let fo = f - skip;
        let k = self.decode_w.shape()[1];
        let up = g.gather(x, 2, self.decode_idx.clone())?;
        let up = g.reshape(up, &[b, fo, nv, k, d])?;
        let w = g.input(self.decode_w.clone());
        let up = g.mul(up, w)?;
        let up = g.sum_axis(up, 3)?;
        let cat = g.concat(&[up, h], 3)?;
        self.head.forward(g, cat)
    }
}

/// Diffusion-step conditioning: sinusoid -> MLP, summed with a projected
/// pooled condition, then SiLU.
#[derive(Debug, Clone)]
pub struct StepConditioner {
    pub step_mlp: Mlp,
    pub pool_proj: crate::neural::Linear,
    pub dim: usize,
}

impl StepConditioner {
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        pooled_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::Config(format!("condition dim {dim} must be even")));
        }
        Ok(Self {
            step_mlp: Mlp::new(
                init,
                &format!("{name}.step"),
                &[dim, dim, dim],
                Activation::Silu,
                false,
            )?,
            pool_proj: crate::neural::Linear::new(init, &format!("{name}.pool"), pooled_dim, dim)?,
            dim,
        })
    }

    /// `pooled: [B, Dp]` -> `[B, dim]`.
    pub fn forward(&self, g: &mut Graph, ks: &[usize], pooled: Var) -> Result<Var> {
        let e = g.input(crate::diffusion::step_embeddings(ks, self.dim)?);
        let e = self.step_mlp.forward(g, e)?;
        let c = self.pool_proj.forward(g, pooled)?;
        let s = g.add(e, c)?;
        Ok(g.silu(s))
    }
}
