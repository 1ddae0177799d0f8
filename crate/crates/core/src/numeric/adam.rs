//! Adaptive-moment optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

pub fn adam_step(params: &mut ParamVector, grads: &[f64], state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            segment: params.layout().segment_of(i).unwrap_or("?").to_string(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (((p, &g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Rescales `grads` in place so their L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::params::{Init, LayoutBuilder};

    fn one(x: f64) -> ParamVector {
        let mut b = LayoutBuilder::new();
        b.push("x", 1, 1, Init::Zeros);
        let mut p = b.zeros();
        p.values_mut()[0] = x;
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one(0.25);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.values(), &[0.25]);
    }

    #[test]
    fn first_step_size() {
        let mut p = one(0.0);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &AdamConfig::default()).unwrap();
        let expected = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p.values()[0] - expected).abs() < 1e-18);
        assert!((p.values()[0] - -9.99999990e-4).abs() < 1e-12);
    }

    #[test]
    fn deterministic_from_copies() {
        let p0 = one(1.5);
        let s0 = AdamState::new(1);
        let (mut pa, mut sa) = (p0.clone(), s0.clone());
        let (mut pb, mut sb) = (p0, s0);
        for g in [0.3, -1.1, 2.0] {
            adam_step(&mut pa, &[g], &mut sa, &AdamConfig::default()).unwrap();
            adam_step(&mut pb, &[g], &mut sb, &AdamConfig::default()).unwrap();
        }
        assert_eq!(pa, pb);
        assert_eq!(sa, sb);
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let mut p = one(0.0);
        let mut s = AdamState::new(1);
        assert!(matches!(
            adam_step(&mut p, &[f64::NAN], &mut s, &AdamConfig::default()),
            Err(Error::Numeric { .. })
        ));
        assert!(matches!(
            adam_step(&mut p, &[1.0, 2.0], &mut s, &AdamConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
