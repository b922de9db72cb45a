//! DDPM noise schedule, forward noising, the ε-prediction objective and
//! ancestral sampling. Shared by the perception and dynamics models.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Graph, Tensor, Var};

/// Hyperparameters of a linear β schedule; the serialized form of
/// [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleConfig", into = "ScheduleConfig")]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    /// `betas[k - 1]` is β_k.
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl TryFrom<ScheduleConfig> for NoiseSchedule {
    type Error = Error;
    fn try_from(c: ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }
}

impl From<NoiseSchedule> for ScheduleConfig {
    fn from(s: NoiseSchedule) -> Self {
        s.config
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::try_from(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// β linearly spaced from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(beta_start) || !ok(beta_end) || (steps > 1 && beta_end <= beta_start) {
            return Err(Error::Config(format!(
                "invalid beta range {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alphas_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            config: ScheduleConfig {
                steps,
                beta_start,
                beta_end,
            },
            betas,
            alphas_bar,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// ᾱ_k, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alphas_bar[k - 1]
        }
    }

    /// Posterior variance σ_k² = β_k (1 − ᾱ_{k−1}) / (1 − ᾱ_k).
    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.beta(k) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::Domain(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `√ᾱ_k s0 + √(1 − ᾱ_k) eps`
pub fn forward_noise(
    s0: &Tensor,
    k: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_step(k)?;
    if s0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "s0 {:?} vs eps {:?}",
            s0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = s0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Tensor::new(s0.shape(), data)
}

/// Sinusoidal embedding with interleaved pairs
/// `(sin(k / 10000^(2i/dim)), cos(k / 10000^(2i/dim)))`.
pub fn step_embedding(k: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "step embedding dim {dim} must be even"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = (k as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(w.sin());
        out.push(w.cos());
    }
    Ok(out)
}

/// Step embeddings for a batch, shape `[B, dim]`.
pub fn step_embeddings(ks: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ks.len() * dim);
    for &k in ks {
        data.extend(step_embedding(k, dim)?);
    }
    Tensor::new(&[ks.len(), dim], data)
}

pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Draws one step per batch element (leading axis of `s0`) and ε, noises
/// `s0`, and returns `mean((ε − model(s_k, k))²)`.
///
/// The noised input is a constant, so gradients reach model parameters only.
pub fn training_loss<R, F>(
    g: &mut Graph,
    s0: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
    model: F,
) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut Graph, Var, &[usize]) -> Result<Var>,
{
    let batch = *s0
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("training batch needs a leading axis".into()))?;
    let ks: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(1..=schedule.steps()))
        .collect();
    let eps = gaussian(s0.shape(), rng);
    training_loss_with(g, s0, &ks, &eps, schedule, model)
}

/// [`training_loss`] with explicit steps and noise.
pub fn training_loss_with<F>(
    g: &mut Graph,
    s0: &Tensor,
    ks: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
    model: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var, &[usize]) -> Result<Var>,
{
    let batch = s0.shape()[0];
    if ks.len() != batch || eps.shape() != s0.shape() {
        return Err(Error::Shape("steps or noise do not match the batch".into()));
    }
    let per = s0.numel() / batch.max(1);
    let mut noisy = Vec::with_capacity(s0.numel());
    for (b, &k) in ks.iter().enumerate() {
        schedule.check_step(k)?;
        let ab = schedule.alpha_bar(k);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = b * per..(b + 1) * per;
        noisy.extend(
            s0.data()[r.clone()]
                .iter()
                .zip(&eps.data()[r])
                .map(|(x, e)| sa * x + sb * e),
        );
    }
    let noisy = g.input(Tensor::new(s0.shape(), noisy)?);
    let pred = model(g, noisy, ks)?;
    let target = g.input(eps.clone());
    g.mse_loss(pred, target)
}

/// Ancestral sampling from pure noise. `predict(s_k, k)` returns ε̂.
///
/// At k = 1 no noise is injected when `deterministic_last_step` is set.
pub fn sample<R, F>(
    shape: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut R,
    deterministic_last_step: bool,
    predict: F,
) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let init = gaussian(shape, rng);
    sample_from(init, schedule, rng, deterministic_last_step, predict)
}

/// Ancestral sampling starting from a given `s_T`.
pub fn sample_from<R, F>(
    mut s: Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
    deterministic_last_step: bool,
    mut predict: F,
) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    for k in (1..=schedule.steps()).rev() {
        let eps = predict(&s, k)?;
        if eps.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "denoiser returned {:?} for state {:?}",
                eps.shape(),
                s.shape()
            )));
        }
        if !eps.is_finite() {
            return Err(Error::Sampling { step: k });
        }
        let beta = schedule.beta(k);
        let c_eps = beta / (1.0 - schedule.alpha_bar(k)).sqrt();
        let c = 1.0 / (1.0 - beta).sqrt();
        let sigma = if k == 1 && deterministic_last_step {
            0.0
        } else {
            schedule.posterior_variance(k).sqrt()
        };
        for (x, e) in s.data_mut().iter_mut().zip(eps.data()) {
            let z: f64 = if sigma > 0.0 {
                StandardNormal.sample(rng)
            } else {
                0.0
            };
            *x = c * (*x - c_eps * e) + sigma * z;
        }
        if !s.is_finite() {
            return Err(Error::Sampling { step: k });
        }
    }
    Ok(s)
}

/// ε that a perfect denoiser would report for `s_k` given the clean `s0`.
pub fn oracle_eps(s_k: &Tensor, s0: &Tensor, k: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = s_k
        .data()
        .iter()
        .zip(s0.data())
        .map(|(x, x0)| (x - a * x0) / b)
        .collect();
    Tensor::new(s_k.shape(), data)
}
