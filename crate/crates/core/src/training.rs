//! Generic optimisation loop shared by both diffusion models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{clip_grad_norm, Adam, OptimConfig, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            optim: OptimConfig::default(),
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optim.lr > 0.0) || self.optim.grad_clip <= 0.0 {
            return Err(Error::Config("lr and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the last `window` losses.
    pub fn final_smoothed(&self, window: usize) -> f64 {
        let n = self.losses.len();
        let w = window.min(n).max(1);
        self.losses[n.saturating_sub(w)..].iter().sum::<f64>() / w as f64
    }
}

/// Trailing moving average with the given window.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Runs `cfg.steps` Adam steps. `step_fn(store, step, rng)` returns the
/// batch loss and gradients aligned with the store.
pub fn run<F>(store: &mut ParamStore, cfg: &TrainConfig, mut step_fn: F) -> Result<TrainReport>
where
    F: FnMut(&ParamStore, usize, &mut ChaCha8Rng) -> Result<(f64, Vec<Option<Tensor>>)>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(store, cfg.optim.clone());
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let (loss, mut grads) = step_fn(store, step, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        clip_grad_norm(&mut grads, cfg.optim.grad_clip);
        opt.step(store, &grads, cfg.optim.lr_at(step, cfg.steps));
        report.losses.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!(
                "step {} loss {:.5}",
                step + 1,
                report.final_smoothed(cfg.log_every)
            );
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_window() {
        assert_eq!(
            moving_average(&[1.0, 3.0, 5.0, 7.0], 2),
            vec![1.0, 2.0, 4.0, 6.0]
        );
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::zeros(&[1])).unwrap();
        let cfg = TrainConfig {
            steps: 10,
            ..Default::default()
        };
        let err = run(&mut s, &cfg, |_, step, _| {
            Ok((if step == 4 { f64::NAN } else { 1.0 }, vec![None]))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 4 }));
    }
}
