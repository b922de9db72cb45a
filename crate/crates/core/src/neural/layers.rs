//! Transformer building blocks on top of [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Silu,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Silu => g.silu(x),
            Activation::Relu => g.relu(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub inner_dim: usize,
    pub cross_attn_dim: usize,
    pub cond_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Hidden width of the feed-forward sublayer as a multiple of `inner_dim`.
    pub ff_mult: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_heads: 4,
            head_dim: 16,
            n_layers: 2,
            inner_dim: 64,
            cross_attn_dim: 64,
            cond_dim: 64,
            dropout: 0.0,
            activation: Activation::Gelu,
            ff_mult: 2,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 || self.n_layers == 0 || self.ff_mult == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.inner_dim != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "inner_dim {} != n_heads {} * head_dim {}",
                self.inner_dim, self.n_heads, self.head_dim
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config(
                "dropout is not supported; set it to 0".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter initialisation context: a store, a name prefix and an RNG.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(&[fan_in, fan_out], bound, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let mut t = Tensor::randn(shape, self.rng);
        t.data_mut().iter_mut().for_each(|x| *x *= std);
        self.store.add(name, t)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let w = init.xavier(&format!("{name}.w"), in_dim, out_dim)?;
        let b = init.zeros(&format!("{name}.b"), &[out_dim])?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// Weights and bias start at zero.
    pub fn zero<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let w = init.zeros(&format!("{name}.w"), &[in_dim, out_dim])?;
        let b = init.zeros(&format!("{name}.b"), &[out_dim])?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Linear layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; the last layer is zero-initialised when
    /// `zero_last` is set.
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        dims: &[usize],
        act: Activation,
        zero_last: bool,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(
                "an MLP needs at least input and output sizes".into(),
            ));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let n = format!("{name}.{i}");
            let last = i == dims.len() - 2;
            layers.push(if last && zero_last {
                Linear::zero(init, &n, dims[i], dims[i + 1])?
            } else {
                Linear::new(init, &n, dims[i], dims[i + 1])?
            });
        }
        Ok(Self { layers, act })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = self.act.apply(g, x);
            }
        }
        Ok(x)
    }
}

/// Layer norm whose scale and shift come from a condition vector:
/// `LN(x) * (1 + gamma(c)) + beta(c)`. The modulation map starts at zero.
#[derive(Debug, Clone)]
pub struct AdaLn {
    pub modulation: Linear,
    pub dim: usize,
}

impl AdaLn {
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        cond_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            modulation: Linear::zero(init, &format!("{name}.mod"), cond_dim, 2 * dim)?,
            dim,
        })
    }

    /// `x: [B, ..., D]`, `cond: [B, Dc]`.
    pub fn forward(&self, g: &mut Graph, x: Var, cond: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let b = g.shape(cond)[0];
        if xs.is_empty() || xs[0] != b || xs[xs.len() - 1] != self.dim {
            return Err(Error::Shape(format!(
                "AdaLN input {xs:?} with condition batch {b}"
            )));
        }
        let m = self.modulation.forward(g, cond)?;
        let mut bshape = vec![1; xs.len()];
        bshape[0] = b;
        bshape[xs.len() - 1] = self.dim;
        let gamma = g.slice(m, 1, 0, self.dim)?;
        let gamma = g.reshape(gamma, &bshape)?;
        let beta = g.slice(m, 1, self.dim, 2 * self.dim)?;
        let beta = g.reshape(beta, &bshape)?;
        let ln = g.layer_norm(x)?;
        let scaled = g.mul(ln, gamma)?;
        let y = g.add(ln, scaled)?;
        g.add(y, beta)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        n_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let inner = n_heads * head_dim;
        Ok(Self {
            wq: Linear::new(init, &format!("{name}.q"), dim, inner)?,
            wk: Linear::new(init, &format!("{name}.k"), ctx_dim, inner)?,
            wv: Linear::new(init, &format!("{name}.v"), ctx_dim, inner)?,
            wo: Linear::new(init, &format!("{name}.o"), inner, dim)?,
            n_heads,
            head_dim,
        })
    }

    fn heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], self.n_heads, self.head_dim])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// Queries from `q_in: [B, T, D]`, keys from `k_in` and values from
    /// `v_in` (both `[B, M, Dc]`). Returns the output and the attention
    /// weights `[B, H, T, M]`.
    pub fn forward_qkv(
        &self,
        g: &mut Graph,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Result<(Var, Var)> {
        let qs = g.shape(q_in).to_vec();
        if qs.len() != 3
            || g.shape(k_in).len() != 3
            || g.shape(k_in)[0] != qs[0]
            || g.shape(k_in)[..2] != g.shape(v_in)[..2]
        {
            return Err(Error::Shape(format!(
                "attention inputs {:?}, {:?}, {:?}",
                qs,
                g.shape(k_in),
                g.shape(v_in)
            )));
        }
        let q = self.wq.forward(g, q_in)?;
        let q = self.heads(g, q)?;
        let k = self.wk.forward(g, k_in)?;
        let k = self.heads(g, k)?;
        let v = self.wv.forward(g, v_in)?;
        let v = self.heads(g, v)?;
        let s = g.bmm(q, k, true)?;
        let s = g.scale(s, 1.0 / (self.head_dim as f64).sqrt());
        let att = g.softmax(s)?;
        let o = g.bmm(att, v, false)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[qs[0], qs[1], self.n_heads * self.head_dim])?;
        Ok((self.wo.forward(g, o)?, att))
    }

    /// Self-attention when `ctx == x`, cross-attention otherwise.
    pub fn forward(&self, g: &mut Graph, x: Var, ctx: Var) -> Result<Var> {
        Ok(self.forward_qkv(g, x, ctx, ctx)?.0)
    }
}

/// Attention along the frame axis of `[B, F, T, D]`, independently for
/// every spatial token, with learned frame positions added to queries and
/// keys.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    pub attn: Attention,
    pub frame_pos: ParamId,
    pub max_frames: usize,
}

impl TemporalAttention {
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        dim: usize,
        n_heads: usize,
        head_dim: usize,
        max_frames: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(init, &format!("{name}.attn"), dim, dim, n_heads, head_dim)?,
            frame_pos: init.normal(&format!("{name}.pos"), &[max_frames, dim], 0.02)?,
            max_frames,
        })
    }

    /// Attention output without the residual.
    pub fn attend(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] == 0 || s[1] > self.max_frames {
            return Err(Error::Shape(format!("temporal attention input {s:?}")));
        }
        let (b, f, t, d) = (s[0], s[1], s[2], s[3]);
        let xt = g.permute(x, &[0, 2, 1, 3])?;
        let xt = g.reshape(xt, &[b * t, f, d])?;
        let pos = g.param(self.frame_pos);
        let pos = g.slice(pos, 0, 0, f)?;
        let qk = g.add(xt, pos)?;
        let (o, _) = self.attn.forward_qkv(g, qk, qk, xt)?;
        let o = g.reshape(o, &[b, t, f, d])?;
        g.permute(o, &[0, 2, 1, 3])
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.attend(g, x)?;
        g.add(x, a)
    }
}

/// Shared per-point MLP followed by a max over each patch.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub mlp: Mlp,
}

impl PatchEncoder {
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(
                init,
                &format!("{name}.mlp"),
                &[in_dim, hidden, out_dim],
                Activation::Relu,
                false,
            )?,
        })
    }

    /// `points: [B, M, S, C]` in patch-relative coordinates -> `[B, M, D]`.
    pub fn forward(&self, g: &mut Graph, points: Var) -> Result<Var> {
        if g.shape(points).len() != 4 {
            return Err(Error::Shape(format!(
                "patch encoder input {:?}",
                g.shape(points)
            )));
        }
        let h = self.mlp.forward(g, points)?;
        g.max_axis(h, 2)
    }
}

/// Per-axis sin/cos features at frequencies `100^(d/F)` followed by an MLP.
#[derive(Debug, Clone)]
pub struct FourierActionEmbedder {
    pub n_frequencies: usize,
    pub mlp: Mlp,
}

impl FourierActionEmbedder {
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        n_frequencies: usize,
        hidden: &[usize],
        out_dim: usize,
    ) -> Result<Self> {
        if n_frequencies == 0 {
            return Err(Error::Config("need at least one Fourier frequency".into()));
        }
        let mut dims = vec![6 * n_frequencies];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        Ok(Self {
            n_frequencies,
            mlp: Mlp::new(init, &format!("{name}.mlp"), &dims, Activation::Silu, false)?,
        })
    }

    pub fn frequencies(n: usize) -> Vec<f64> {
        (0..n).map(|d| 100f64.powf(d as f64 / n as f64)).collect()
    }

    /// Raw features `[B, N, 6F]`, laid out per axis as `[sin(f_0..), cos(f_0..)]`.
    pub fn features(g: &mut Graph, actions: Var, n_frequencies: usize) -> Result<Var> {
        let s = g.shape(actions).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!(
                "actions must be [B, N, 3], got {s:?}"
            )));
        }
        let w: Vec<f64> = Self::frequencies(n_frequencies)
            .iter()
            .map(|f| std::f64::consts::TAU * f)
            .collect();
        let a = g.reshape(actions, &[s[0], s[1], 3, 1])?;
        let w = g.input(Tensor::new(&[n_frequencies], w)?);
        let phase = g.mul(a, w)?;
        let sn = g.sin(phase);
        let cs = g.cos(phase);
        let f = g.concat(&[sn, cs], 3)?;
        g.reshape(f, &[s[0], s[1], 6 * n_frequencies])
    }

    pub fn forward(&self, g: &mut Graph, actions: Var) -> Result<Var> {
        let f = Self::features(g, actions, self.n_frequencies)?;
        self.mlp.forward(g, f)
    }
}

/// One transformer block: spatial self-attention, optional temporal
/// attention, cross-attention to condition tokens and a feed-forward layer,
/// each behind an AdaLN and a residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_self: AdaLn,
    pub self_attn: Attention,
    pub temporal: Option<(AdaLn, TemporalAttention)>,
    pub ln_cross: AdaLn,
    pub cross_attn: Attention,
    pub ln_ff: AdaLn,
    pub ff: Mlp,
}

impl Block {
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        cfg: &TransformerConfig,
        max_frames: Option<usize>,
    ) -> Result<Self> {
        let d = cfg.inner_dim;
        let temporal = match max_frames {
            Some(f) => Some((
                AdaLn::new(init, &format!("{name}.ln_t"), cfg.cond_dim, d)?,
                TemporalAttention::new(
                    init,
                    &format!("{name}.temporal"),
                    d,
                    cfg.n_heads,
                    cfg.head_dim,
                    f,
                )?,
            )),
            None => None,
        };
        Ok(Self {
            ln_self: AdaLn::new(init, &format!("{name}.ln_self"), cfg.cond_dim, d)?,
            self_attn: Attention::new(
                init,
                &format!("{name}.self"),
                d,
                d,
                cfg.n_heads,
                cfg.head_dim,
            )?,
            temporal,
            ln_cross: AdaLn::new(init, &format!("{name}.ln_cross"), cfg.cond_dim, d)?,
            cross_attn: Attention::new(
                init,
                &format!("{name}.cross"),
                d,
                cfg.cross_attn_dim,
                cfg.n_heads,
                cfg.head_dim,
            )?,
            ln_ff: AdaLn::new(init, &format!("{name}.ln_ff"), cfg.cond_dim, d)?,
            ff: Mlp::new(
                init,
                &format!("{name}.ff"),
                &[d, cfg.ff_mult * d, d],
                cfg.activation,
                false,
            )?,
        })
    }

    /// `x: [B, F, P, D]`, `cond: [B, Dc]`, `ctx: [B, M, Dx]`.
    pub fn forward(&self, g: &mut Graph, x: Var, cond: Var, ctx: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "block input must be [B, F, P, D], got {s:?}"
            )));
        }
        let (b, f, p, d) = (s[0], s[1], s[2], s[3]);
        let h = self.ln_self.forward(g, x, cond)?;
        let h = g.reshape(h, &[b * f, p, d])?;
        let h = self.self_attn.forward(g, h, h)?;
        let h = g.reshape(h, &[b, f, p, d])?;
        let mut x = g.add(x, h)?;
        if let Some((ln, t)) = &self.temporal {
            let h = ln.forward(g, x, cond)?;
            let h = t.attend(g, h)?;
            x = g.add(x, h)?;
        }
        let h = self.ln_cross.forward(g, x, cond)?;
        let h = g.reshape(h, &[b, f * p, d])?;
        let h = self.cross_attn.forward(g, h, ctx)?;
        let h = g.reshape(h, &[b, f, p, d])?;
        let x = g.add(x, h)?;
        let h = self.ln_ff.forward(g, x, cond)?;
        let h = self.ff.forward(g, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::default().validate().is_ok());
        let bad = TransformerConfig {
            inner_dim: 63,
            ..TransformerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let (mut store, mut rng) = setup();
        let att = Attention::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "a",
            8,
            8,
            2,
            4,
        )
        .unwrap();
        let x = Tensor::randn(&[2, 1, 8], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let (out, w) = att.forward_qkv(&mut g, xv, xv, xv).unwrap();
        assert!(g.value(w).data().iter().all(|&a| a == 1.0));
        let v = att.wv.forward(&mut g, xv).unwrap();
        let expect = att.wo.forward(&mut g, v).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adaln_zero_init_is_layer_norm() {
        let (mut store, mut rng) = setup();
        let ln = AdaLn::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "ln",
            5,
            6,
        )
        .unwrap();
        let x = Tensor::randn(&[2, 3, 6], &mut rng);
        let c = Tensor::randn(&[2, 5], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let cv = g.input(c);
        let y = ln.forward(&mut g, xv, cv).unwrap();
        let plain = g.layer_norm(xv).unwrap();
        assert_eq!(g.value(y).data(), g.value(plain).data());

        let row = g.input(Tensor::full(&[1, 1, 6], 3.0));
        let z = g.layer_norm(row).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fourier_features() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[1, 1, 3]));
        let f = FourierActionEmbedder::features(&mut g, a, 8).unwrap();
        assert_eq!(g.shape(f), &[1, 1, 48]);
        for (i, &v) in g.value(f).data().iter().enumerate() {
            assert_eq!(v, if (i / 8) % 2 == 0 { 0.0 } else { 1.0 });
        }
        let a = g.input(Tensor::new(&[1, 1, 3], vec![0.25, 0.0, 0.0]).unwrap());
        let f = FourierActionEmbedder::features(&mut g, a, 1).unwrap();
        assert!((g.value(f).data()[0] - 1.0).abs() < 1e-15);
        assert!(g.value(f).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn temporal_single_frame_is_residual_value_pass() {
        let (mut store, mut rng) = setup();
        let t = TemporalAttention::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "t",
            8,
            2,
            4,
            4,
        )
        .unwrap();
        let x = Tensor::randn(&[2, 1, 3, 8], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let y = t.forward(&mut g, xv).unwrap();
        let v = t.attn.wv.forward(&mut g, xv).unwrap();
        let o = t.attn.wo.forward(&mut g, v).unwrap();
        let expect = g.add(xv, o).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
