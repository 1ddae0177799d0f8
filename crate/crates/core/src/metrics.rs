//! Gaussian-kernel MMD between forecast and observed marginals, and the
//! Brier score of outcome probabilities.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::forecast::ForecastBundle;
use crate::par;

/// Lower bound on the median-heuristic bandwidth.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

fn kernel_mean(x: &[f64], y: &[f64], inv2s2: f64) -> f64 {
    let mut acc = 0.0;
    for &a in x {
        for &b in y {
            let d = a - b;
            acc += (-d * d * inv2s2).exp();
        }
    }
    acc / (x.len() * y.len()) as f64
}

/// Biased (V-statistic) squared MMD with `k(x, y) = exp(−(x − y)² / 2σ²)`:
/// `mean k(X, X) + mean k(Y, Y) − 2 mean k(X, Y)` over all pairs.
pub fn mmd_squared(x: &[f64], y: &[f64], bandwidth: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InsufficientSamples(
            "mmd needs at least one sample per set".into(),
        ));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::config(format!("mmd bandwidth must be > 0 (got {bandwidth})")));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let xy = kernel_mean(x, y, inv);
    // the cross term is symmetric; evaluating it once per order keeps
    // mmd(X, Y) and mmd(Y, X) bit-identical
    let yx = kernel_mean(y, x, inv);
    Ok(kernel_mean(x, x, inv) + kernel_mean(y, y, inv) - (xy + yx))
}

/// Number of pairs `i < j` with `|v_i − v_j| <= d` in sorted `v`.
fn pairs_within(sorted: &[f64], d: f64) -> usize {
    let mut count = 0;
    let mut lo = 0;
    for hi in 0..sorted.len() {
        while sorted[hi] - sorted[lo] > d {
            lo += 1;
        }
        count += hi - lo;
    }
    count
}

/// Median of the pairwise distances `|v_i − v_j|`, `i < j` (the lower
/// median for an even pair count), floored at [`BANDWIDTH_FLOOR`].
///
/// Exact without materialising the pairs: bisection on the bit patterns of
/// non-negative doubles, which are ordered like the values.
pub fn median_heuristic(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return BANDWIDTH_FLOOR;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pairs = n * (n - 1) / 2;
    let rank = pairs.div_ceil(2);
    let (mut lo, mut hi) = (0u64, (v[n - 1] - v[0]).to_bits());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pairs_within(&v, f64::from_bits(mid)) >= rank {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    f64::from_bits(lo).max(BANDWIDTH_FLOOR)
}

/// How the kernel bandwidth of each `(t, d)` slice is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    /// [`median_heuristic`] over the pooled forecast and observed samples.
    MedianHeuristic,
    Fixed(f64),
}

impl BandwidthRule {
    pub fn bandwidth(&self, pooled: &[f64]) -> f64 {
        match self {
            BandwidthRule::MedianHeuristic => median_heuristic(pooled),
            BandwidthRule::Fixed(b) => *b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdCurve {
    /// Per step `t = 1..T`: squared MMD averaged over state dimensions.
    pub values: Vec<f64>,
    /// Bandwidth per step and dimension.
    pub bandwidths: Vec<Vec<f64>>,
    pub n_forecast: usize,
    pub n_observed: usize,
}

impl MmdCurve {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Mean over the steps `t` in `[from, to)`, counted from 0.
    pub fn mean_over(&self, from: usize, to: usize) -> f64 {
        let s = &self.values[from..to];
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "t,mmd")?;
        for (t, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{:e}", t + 1, v)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evenly spaced subsample of at most `max` indices out of `n`.
fn thin(n: usize, max: usize) -> Vec<usize> {
    if max == 0 || n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|k| k * n / max).collect()
    }
}

/// Per-step, per-dimension MMD between forecast samples and observed
/// trajectories, averaged over dimensions, with one bandwidth per `(t, d)`
/// slice.
///
/// With `max_samples > 0`, each side is thinned to at most that many
/// evenly spaced samples before comparison.
pub fn trajectory_mmd(
    bundle: &ForecastBundle,
    observed: &[Trajectory],
    rule: BandwidthRule,
    max_samples: usize,
) -> Result<MmdCurve> {
    if observed.len() < 2 {
        return Err(Error::InsufficientSamples(
            "trajectory mmd needs >= 2 observed trajectories".into(),
        ));
    }
    if bundle.is_empty() {
        return Err(Error::InsufficientSamples("empty forecast bundle".into()));
    }
    let (t_len, ds) = (bundle.horizon(), bundle.state_dim());
    if observed.iter().any(|o| o.horizon() != t_len || o.state_dim() != ds) {
        return Err(Error::dim(format!(
            "observed trajectories must have horizon {t_len} and {ds} state dimensions"
        )));
    }
    let fi = thin(bundle.len(), max_samples);
    let oi = thin(observed.len(), max_samples);
    let per_step = par::try_map_range(t_len, |t| {
        let mut total = 0.0;
        let mut bws = Vec::with_capacity(ds);
        for d in 0..ds {
            let x: Vec<f64> = fi.iter().map(|&i| bundle.forecasts[i][t][d]).collect();
            let y: Vec<f64> = oi.iter().map(|&i| observed[i].states[t + 1][d]).collect();
            let pooled: Vec<f64> = x.iter().chain(&y).copied().collect();
            let bw = rule.bandwidth(&pooled);
            total += mmd_squared(&x, &y, bw)?;
            bws.push(bw);
        }
        Ok::<_, Error>((total / ds as f64, bws))
    })?;
    let (values, bandwidths) = per_step.into_iter().unzip();
    Ok(MmdCurve {
        values,
        bandwidths,
        n_forecast: fi.len(),
        n_observed: oi.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrierResult {
    pub score: f64,
    /// `(predicted probability, observed outcome)` per scenario.
    pub pairs: Vec<(f64, bool)>,
}

impl BrierResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "scenario,probability,outcome")?;
        for (i, (p, o)) in self.pairs.iter().enumerate() {
            writeln!(w, "{i},{p:e},{}", u8::from(*o))?;
        }
        writeln!(w, "# brier,{:e}", self.score)?;
        w.flush()?;
        Ok(())
    }
}

/// Mean of `(p − o)²` with `o ∈ {0, 1}`.
pub fn brier(pairs: &[(f64, bool)]) -> Result<BrierResult> {
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples("brier score needs at least one pair".into()));
    }
    if let Some((p, _)) = pairs.iter().find(|(p, _)| !(0.0..=1.0).contains(p)) {
        return Err(Error::OutOfRange(format!("probability {p} outside [0, 1]")));
    }
    let score = pairs
        .iter()
        .map(|&(p, o)| {
            let d = p - f64::from(u8::from(o));
            d * d
        })
        .sum::<f64>()
        / pairs.len() as f64;
    Ok(BrierResult {
        score,
        pairs: pairs.to_vec(),
    })
}
