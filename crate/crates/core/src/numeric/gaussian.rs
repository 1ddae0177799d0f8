//! Diagonal Gaussian heads: reparameterised sampling and KL to N(0, I).

use serde::{Deserialize, Serialize};

use super::autodiff::{soft_clamp_scalar, Backend};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianHead {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::dim(format!(
                "mean has {} entries, logvar {}",
                mean.len(),
                logvar.len()
            )));
        }
        Ok(Self { mean, logvar })
    }

    /// Builds a head from raw network outputs, squashing logvar into
    /// `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn from_raw(mean: Vec<f64>, raw_logvar: &[f64]) -> Result<Self> {
        let logvar = raw_logvar
            .iter()
            .map(|&v| soft_clamp_scalar(v, LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Self::new(mean, logvar)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `mean + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(head: &GaussianHead, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != head.len() {
        return Err(Error::dim(format!(
            "noise has {} entries, head {}",
            noise.len(),
            head.len()
        )));
    }
    Ok(head
        .mean
        .iter()
        .zip(&head.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// `0.5 · Σ (mean² + exp(logvar) − 1 − logvar)`.
pub fn kl_to_standard_normal(head: &GaussianHead) -> f64 {
    0.5 * head
        .mean
        .iter()
        .zip(&head.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Differentiable reparameterisation on batched values.
pub fn reparameterize_v<B: Backend>(be: &mut B, mean: &B::V, logvar: &B::V, noise: &Tensor) -> B::V {
    let half = be.scale(logvar, 0.5);
    let std = be.exp(&half);
    let spread = be.mul_const(&std, noise);
    be.add(mean, &spread)
}

/// Differentiable KL to N(0, I), summed over every row and column.
pub fn kl_to_standard_normal_v<B: Backend>(be: &mut B, mean: &B::V, logvar: &B::V) -> B::V {
    let n = {
        let (r, c) = be.value(mean).shape();
        (r * c) as f64
    };
    let m2 = be.sum_squares(mean);
    let ev = be.exp(logvar);
    let sev = be.sum(&ev);
    let slv = be.sum(logvar);
    let a = be.add(&m2, &sev);
    let a = be.sub(&a, &slv);
    let a = be.add_scalar(&a, -n);
    be.scale(&a, 0.5)
}
