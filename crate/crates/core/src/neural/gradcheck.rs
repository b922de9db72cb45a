//! Central finite-difference checks of the analytic gradients.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::layers::*;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub passed: bool,
}

/// Scalar-valued function of some input variables and a parameter store.
pub type LossFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Options for [`check`].
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Coordinates checked per tensor; all when the tensor is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            floor: 1e-3,
            max_coords: 24,
            seed: 0,
        }
    }
}

fn eval(f: &LossFn, store: &ParamStore, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let l = f(&mut g, &vars)?;
    Ok(g.value(l).item())
}

/// Compares analytic gradients of `f` with central differences for every
/// input tensor and every parameter in `store`. Returns the max relative
/// error and the number of coordinates compared.
pub fn check(
    f: &LossFn,
    store: &ParamStore,
    inputs: &[Tensor],
    opt: CheckOptions,
) -> Result<(f64, usize)> {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let l = f(&mut g, &vars)?;
    // Touch every parameter so unused ones report zero gradients.
    let grads = g.backward(l)?;
    let pgrads = grads.params();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= opt.max_coords {
            (0..n).collect()
        } else {
            index::sample(rng, n, opt.max_coords).into_vec()
        }
    };

    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for j in pick(inputs[k].numel(), &mut rng) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += opt.step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= opt.step;
            let num = (eval(f, store, &plus)? - eval(f, store, &minus)?) / (2.0 * opt.step);
            worst = worst.max(rel_error(analytic[j], num, opt.floor));
            count += 1;
        }
    }
    let mut scratch = store.clone();
    for (i, (_, t)) in store.iter().enumerate() {
        let id = super::params::ParamId(i);
        let analytic = pgrads[i]
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for j in pick(t.numel(), &mut rng) {
            let orig = t.data()[j];
            scratch.get_mut(id).data_mut()[j] = orig + opt.step;
            let fp = eval(f, &scratch, inputs)?;
            scratch.get_mut(id).data_mut()[j] = orig - opt.step;
            let fm = eval(f, &scratch, inputs)?;
            scratch.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_error(
                analytic[j],
                (fp - fm) / (2.0 * opt.step),
                opt.floor,
            ));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so that
/// symmetric errors cannot cancel.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(g.shape(x), &mut rng);
    let w = g.input(w);
    let y = g.mul(x, w)?;
    Ok(g.sum_all(y))
}

/// A registered differentiable operation with its test fixture.
pub struct GradCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub f: Box<LossFn<'static>>,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

fn case(
    name: &'static str,
    store: ParamStore,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        store,
        inputs,
        f: Box::new(f),
    }
}

/// Every primitive op and composite layer, each on a small random instance.
pub fn op_registry(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let empty = ParamStore::new;
    let mut cases = vec![
        case(
            "add",
            empty(),
            vec![randn(&[2, 3, 4], r), randn(&[3, 1], r)],
            |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, 1)
            },
        ),
        case(
            "sub",
            empty(),
            vec![randn(&[2, 1, 4], r), randn(&[3, 4], r)],
            |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted_sum(g, y, 2)
            },
        ),
        case(
            "mul",
            empty(),
            vec![randn(&[2, 3, 4], r), randn(&[2, 1, 4], r)],
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, 3)
            },
        ),
        case(
            "mul_same_shape",
            empty(),
            vec![randn(&[3, 4], r), randn(&[3, 4], r)],
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, 4)
            },
        ),
        case("scale", empty(), vec![randn(&[5], r)], |g, v| {
            let y = g.scale(v[0], -2.5);
            weighted_sum(g, y, 5)
        }),
        case(
            "matmul",
            empty(),
            vec![randn(&[2, 3, 4], r), randn(&[4, 5], r)],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 6)
            },
        ),
        case(
            "bmm",
            empty(),
            vec![randn(&[2, 3, 4], r), randn(&[2, 4, 2], r)],
            |g, v| {
                let y = g.bmm(v[0], v[1], false)?;
                weighted_sum(g, y, 7)
            },
        ),
        case(
            "bmm_trans_b",
            empty(),
            vec![randn(&[2, 3, 4], r), randn(&[2, 5, 4], r)],
            |g, v| {
                let y = g.bmm(v[0], v[1], true)?;
                weighted_sum(g, y, 8)
            },
        ),
        case("softmax", empty(), vec![randn(&[3, 5], r)], |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, 9)
        }),
        case("layer_norm", empty(), vec![randn(&[3, 6], r)], |g, v| {
            let y = g.layer_norm(v[0])?;
            weighted_sum(g, y, 10)
        }),
        case("gelu", empty(), vec![randn(&[8], r)], |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 11)
        }),
        case("silu", empty(), vec![randn(&[8], r)], |g, v| {
            let y = g.silu(v[0]);
            weighted_sum(g, y, 12)
        }),
        case("relu", empty(), vec![randn(&[8], r)], |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, 13)
        }),
        case("sin", empty(), vec![randn(&[8], r)], |g, v| {
            let y = g.sin(v[0]);
            weighted_sum(g, y, 14)
        }),
        case("cos", empty(), vec![randn(&[8], r)], |g, v| {
            let y = g.cos(v[0]);
            weighted_sum(g, y, 15)
        }),
        case("reshape", empty(), vec![randn(&[2, 6], r)], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            weighted_sum(g, y, 16)
        }),
        case("permute", empty(), vec![randn(&[2, 3, 4], r)], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            weighted_sum(g, y, 17)
        }),
        case(
            "concat",
            empty(),
            vec![randn(&[2, 3], r), randn(&[2, 2], r)],
            |g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                weighted_sum(g, y, 18)
            },
        ),
        case("slice", empty(), vec![randn(&[2, 5, 3], r)], |g, v| {
            let y = g.slice(v[0], 1, 1, 4)?;
            weighted_sum(g, y, 19)
        }),
        case("gather", empty(), vec![randn(&[2, 4, 3], r)], |g, v| {
            let y = g.gather(v[0], 1, Arc::from(vec![3, 0, 3, 1]))?;
            weighted_sum(g, y, 20)
        }),
        case("max_axis", empty(), vec![randn(&[3, 4, 2], r)], |g, v| {
            let y = g.max_axis(v[0], 1)?;
            weighted_sum(g, y, 21)
        }),
        case("sum_axis", empty(), vec![randn(&[3, 4, 2], r)], |g, v| {
            let y = g.sum_axis(v[0], 1)?;
            weighted_sum(g, y, 22)
        }),
        case("mean_axis", empty(), vec![randn(&[3, 4, 2], r)], |g, v| {
            let y = g.mean_axis(v[0], 2)?;
            weighted_sum(g, y, 23)
        }),
        case("sum_all", empty(), vec![randn(&[3, 2], r)], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum_all(y))
        }),
        case("mean_all", empty(), vec![randn(&[3, 2], r)], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean_all(y))
        }),
        case(
            "mse_loss",
            empty(),
            vec![randn(&[3, 2], r), randn(&[3, 2], r)],
            |g, v| g.mse_loss(v[0], v[1]),
        ),
    ];

    let mut layer_case =
        |name: &'static str,
         build: &dyn Fn(
            &mut Init<ChaCha8Rng>,
        ) -> Result<Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>>,
         inputs: Vec<Tensor>|
         -> Result<()> {
            let mut store = ParamStore::new();
            let mut prng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(cases.len() as u64));
            let f = build(&mut Init {
                store: &mut store,
                rng: &mut prng,
            })?;
            // Zero-initialised maps would make parts of the check vacuous.
            perturb(&mut store, &mut prng);
            cases.push(GradCase {
                name,
                store,
                inputs,
                f,
            });
            Ok(())
        };

    layer_case(
        "linear",
        &|i| {
            let l = Linear::new(i, "l", 4, 3)?;
            Ok(Box::new(move |g, v| {
                let y = l.forward(g, v[0])?;
                weighted_sum(g, y, 30)
            }))
        },
        vec![randn(&[2, 4], r)],
    )?;
    layer_case(
        "mhsa",
        &|i| {
            let a = Attention::new(i, "a", 8, 8, 2, 4)?;
            Ok(Box::new(move |g, v| {
                let y = a.forward(g, v[0], v[0])?;
                weighted_sum(g, y, 31)
            }))
        },
        vec![randn(&[2, 3, 8], r)],
    )?;
    layer_case(
        "cross_attention",
        &|i| {
            let a = Attention::new(i, "c", 8, 6, 2, 4)?;
            Ok(Box::new(move |g, v| {
                let y = a.forward(g, v[0], v[1])?;
                weighted_sum(g, y, 32)
            }))
        },
        vec![randn(&[2, 3, 8], r), randn(&[2, 4, 6], r)],
    )?;
    layer_case(
        "ada_layer_norm",
        &|i| {
            let a = AdaLn::new(i, "n", 5, 6)?;
            Ok(Box::new(move |g, v| {
                let y = a.forward(g, v[0], v[1])?;
                weighted_sum(g, y, 33)
            }))
        },
        vec![randn(&[2, 3, 6], r), randn(&[2, 5], r)],
    )?;
    layer_case(
        "patch_encoder",
        &|i| {
            let p = PatchEncoder::new(i, "p", 3, 8, 6)?;
            Ok(Box::new(move |g, v| {
                let y = p.forward(g, v[0])?;
                weighted_sum(g, y, 34)
            }))
        },
        vec![randn(&[2, 3, 4, 3], r)],
    )?;
    layer_case(
        "fourier_action_embed",
        &|i| {
            let e = FourierActionEmbedder::new(i, "f", 2, &[8], 6)?;
            Ok(Box::new(move |g, v| {
                let y = e.forward(g, v[0])?;
                weighted_sum(g, y, 35)
            }))
        },
        vec![{
            let mut t = randn(&[1, 2, 3], r);
            t.data_mut().iter_mut().for_each(|x| *x *= 0.1);
            t
        }],
    )?;
    layer_case(
        "temporal_attention",
        &|i| {
            let t = TemporalAttention::new(i, "t", 8, 2, 4, 4)?;
            Ok(Box::new(move |g, v| {
                let y = t.forward(g, v[0])?;
                weighted_sum(g, y, 36)
            }))
        },
        vec![randn(&[1, 3, 2, 8], r)],
    )?;
    layer_case(
        "transformer_block",
        &|i| {
            let cfg = TransformerConfig {
                n_heads: 2,
                head_dim: 4,
                inner_dim: 8,
                cross_attn_dim: 6,
                cond_dim: 5,
                ..TransformerConfig::default()
            };
            let b = Block::new(i, "b", &cfg, Some(3))?;
            Ok(Box::new(move |g, v| {
                let y = b.forward(g, v[0], v[1], v[2])?;
                weighted_sum(g, y, 37)
            }))
        },
        vec![
            randn(&[1, 2, 3, 8], r),
            randn(&[1, 5], r),
            randn(&[1, 4, 6], r),
        ],
    )?;
    Ok(cases)
}

/// Adds small noise to every parameter so zero-initialised maps carry
/// gradient signal through the whole graph.
pub fn perturb<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    for i in 0..store.len() {
        let t = store.get_mut(super::params::ParamId(i));
        for x in t.data_mut() {
            *x += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
}

/// Runs every case and reports per-case maxima against `threshold`.
pub fn run_cases(
    cases: &[GradCase],
    threshold: f64,
    opt: CheckOptions,
) -> Result<Vec<GradCheckResult>> {
    cases
        .iter()
        .map(|c| {
            let (err, n) = check(c.f.as_ref(), &c.store, &c.inputs, opt)?;
            Ok(GradCheckResult {
                name: c.name.to_string(),
                max_rel_error: err,
                n_checked: n,
                passed: err < threshold,
            })
        })
        .collect()
}
