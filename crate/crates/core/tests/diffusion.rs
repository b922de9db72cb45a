use clothdiff_core::diffusion::{
    forward_noise, gaussian, oracle_eps, sample, sample_from, NoiseSchedule,
};
use clothdiff_core::neural::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn forward_marginals_match_monte_carlo() {
    let s = NoiseSchedule::default();
    let s0 = Tensor::new(&[3], vec![0.7, -1.2, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    for k in [1, s.steps() / 2, s.steps()] {
        let ab = s.alpha_bar(k);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps = gaussian(&[3], &mut rng);
            let x = forward_noise(&s0, k, &eps, &s).unwrap();
            for d in 0..3 {
                sum[d] += x.data()[d];
                sq[d] += x.data()[d] * x.data()[d];
            }
        }
        for d in 0..3 {
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            let (m_true, v_true) = (ab.sqrt() * s0.data()[d], 1.0 - ab);
            assert!(
                (mean - m_true).abs() < 3.0 * (v_true / n as f64).sqrt(),
                "k={k} mean {mean} vs {m_true}"
            );
            assert!(
                (var - v_true).abs() < 3.0 * v_true * (2.0 / (n - 1) as f64).sqrt(),
                "k={k} var {var} vs {v_true}"
            );
        }
    }
}

proptest! {
    #[test]
    fn oracle_sampler_recovers_clean_state(steps in 1usize..=10, seed in any::<u64>(), x0 in prop::collection::vec(-2.0f64..2.0, 6)) {
        let s = NoiseSchedule::linear(steps, 1e-2, 0.5).unwrap();
        let s0 = Tensor::new(&[2, 3], x0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = sample(&[2, 3], &s, &mut rng, true, |x, k| oracle_eps(x, &s0, k, &s)).unwrap();
        for (a, b) in out.data().iter().zip(s0.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_eps_inverts_forward_noise(k in 1usize..=100, seed in any::<u64>()) {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = gaussian(&[4], &mut rng);
        let eps = gaussian(&[4], &mut rng);
        let x = forward_noise(&s0, k, &eps, &s).unwrap();
        let back = oracle_eps(&x, &s0, k, &s).unwrap();
        for (a, b) in back.data().iter().zip(eps.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn alpha_bar_is_decreasing(steps in 2usize..200, lo in 1e-4f64..1e-2, span in 1e-3f64..0.3) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        for k in 1..steps {
            prop_assert!(s.alpha_bar(k + 1) < s.alpha_bar(k));
            prop_assert!(s.posterior_variance(k + 1) <= s.beta(k + 1) + 1e-15);
        }
    }
}

#[test]
fn same_seed_same_samples() {
    let s = NoiseSchedule::linear(5, 0.05, 0.3).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = gaussian(&[4], &mut rng);
        sample_from(init, &s, &mut rng, false, |x, _| Ok(x.clone())).unwrap()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}
