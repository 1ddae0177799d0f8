//! Residual algebra between observed and forecast state sequences.
//!
//! With `ȳ` the ensemble mean, the total residual `y − ȳ` splits exactly into
//! an aleatoric part `y − ŷ_m` and an epistemic part `ŷ_m − ȳ`.

use crate::error::{Error, Result};

/// Elementwise `a − b` over equal-shaped sequences.
pub fn difference(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::dim(format!(
            "sequence shapes differ ({} vs {} steps)",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect())
}

/// `y_true − ȳ`.
pub fn total_residual(y_true: &[Vec<f64>], mean: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    difference(y_true, mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch() {
        assert!(difference(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
        assert!(difference(&[vec![1.0]], &[]).is_err());
    }
}
