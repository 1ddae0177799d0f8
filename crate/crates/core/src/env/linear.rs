//! `linear-toy`: `s' = A s + B (a + noise)` with `A = 0.9 I`, `B = 0.1 I`.
//!
//! With `action_noise_std = σ_a` the per-step state noise is `0.1 σ_a`, so
//! the default σ_a = 1 injects state noise of std 0.1.

use super::{EnvConfig, Scenario};
use crate::numeric::RngStream;

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;
pub const DECAY: f64 = 0.9;
pub const GAIN: f64 = 0.1;

pub(super) fn step(s: &[f64], a: &[f64], rng: &mut RngStream, cfg: &EnvConfig) -> Vec<f64> {
    s.iter()
        .zip(a)
        .map(|(&x, &u)| {
            let noise = if cfg.action_noise_std > 0.0 {
                cfg.action_noise_std * rng.normal()
            } else {
                0.0
            };
            DECAY * x + GAIN * (u + noise)
        })
        .collect()
}

pub(super) fn sample_scenario(rng: &mut RngStream) -> Scenario {
    Scenario {
        s0: vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
        goal: vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_map_is_exact() {
        let cfg = EnvConfig::linear_toy(0.0, 10);
        let n = step(&[1.0, -2.0], &[0.5, 0.0], &mut RngStream::new(0, 0), &cfg);
        assert_eq!(n, vec![0.9 + 0.05, -1.8]);
    }

    #[test]
    fn injected_noise_has_expected_std() {
        let cfg = EnvConfig::linear_toy(1.0, 10);
        let mut rng = RngStream::new(5, 0);
        let n = 20_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| step(&[0.0, 0.0], &[0.0, 0.0], &mut rng, &cfg)[0])
            .collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.003);
    }
}
