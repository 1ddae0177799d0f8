//! Shared optimisation loop and mini-batch plumbing.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::env::{Normalization, Trajectory};
use crate::error::{Error, Result};
use crate::numeric::{adam_step, clip_global_norm, AdamConfig, AdamState, ParamVector, RngStream, Tensor};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch. Fixed, so that small and large datasets
    /// get the same optimisation budget.
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Length of the windows cut from each trajectory; 0 means the full
    /// horizon.
    pub window: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Each batch gradient is evaluated in this many pieces, summed in a
    /// fixed order.
    pub grad_shards: usize,
    /// Fraction of trajectories held out for model selection: the
    /// parameters of the epoch with the lowest held-out loss are kept.
    /// 0 keeps the last epoch.
    #[serde(default)]
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batches_per_epoch: 25,
            batch_size: 16,
            window: 32,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            grad_clip: 10.0,
            grad_shards: 4,
            holdout: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self, section: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push(format!("{section}.epochs must be >= 1"));
        }
        if self.batches_per_epoch == 0 {
            v.push(format!("{section}.batches_per_epoch must be >= 1"));
        }
        if self.batch_size == 0 {
            v.push(format!("{section}.batch_size must be >= 1"));
        }
        if self.grad_shards == 0 {
            v.push(format!("{section}.grad_shards must be >= 1"));
        }
        if !(self.adam.lr > 0.0) {
            v.push(format!("{section}.adam.lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            v.push(format!("{section}.adam decay rates must lie in [0, 1)"));
        }
        if !(self.grad_clip >= 0.0) {
            v.push(format!("{section}.grad_clip must be >= 0"));
        }
        if !(0.0..0.9).contains(&self.holdout) {
            v.push(format!("{section}.holdout must lie in [0, 0.9)"));
        }
        v
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let v = self.violations(section);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub(crate) fn window_len(&self, horizon: usize) -> usize {
        if self.window == 0 {
            horizon
        } else {
            self.window.min(horizon)
        }
    }
}

/// Splits `0..n` into (training, held-out) index sets. At least one
/// trajectory always stays in training.
pub(crate) fn split_holdout(n: usize, fraction: f64, rng: &mut RngStream) -> (Vec<usize>, Vec<usize>) {
    let k = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1));
    let perm = rng.permutation(n);
    let mut held: Vec<usize> = perm[..k].to_vec();
    let mut train: Vec<usize> = perm[k..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

/// Non-overlapping windows covering the given trajectories.
pub(crate) fn tiling_windows(trajs: &[usize], horizon: usize, len: usize) -> Vec<Window> {
    trajs
        .iter()
        .flat_map(|&traj| (0..horizon / len).map(move |k| Window { traj, start: k * len }))
        .collect()
}

/// A contiguous slice `[start, start + len)` of trajectory `traj`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub traj: usize,
    pub start: usize,
}

/// Draws `count` windows from the trajectories listed in `trajs`.
pub(crate) fn sample_windows(
    rng: &mut RngStream,
    trajs: &[usize],
    horizon: usize,
    len: usize,
    count: usize,
) -> Vec<Window> {
    (0..count)
        .map(|_| Window {
            traj: trajs[rng.below(trajs.len())],
            start: rng.below(horizon - len + 1),
        })
        .collect()
}

/// A trajectory in normalized coordinates.
#[derive(Clone, Debug)]
pub(crate) struct NormSeq {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub deltas: Vec<Vec<f64>>,
}

impl NormSeq {
    pub fn new(t: &Trajectory, norm: &Normalization) -> Self {
        let deltas = t
            .states
            .windows(2)
            .map(|w| {
                let d: Vec<f64> = w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect();
                norm.norm_delta(&d)
            })
            .collect();
        Self {
            states: t.states.iter().map(|s| norm.norm_state(s)).collect(),
            actions: t.actions.iter().map(|a| norm.norm_action(a)).collect(),
            deltas,
        }
    }
}

/// Stacks equal-length rows into a matrix.
pub(crate) fn stack<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    let mut cols = 0;
    for r in rows {
        cols = r.len();
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::from_vec(n, cols, data)
}

pub(crate) trait Batch: Sync {
    fn len(&self) -> usize;
}

/// Held-out loss of a parameter set; lower is better.
pub(crate) type Validation<'a> = dyn Fn(&[ParamVector]) -> Result<f64> + 'a;

#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct FitOutcome {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Held-out loss per epoch; empty without validation.
    pub val_losses: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Runs `cfg.epochs × cfg.batches_per_epoch` optimizer steps over the
/// parameter vectors in `params`.
///
/// `shard_loss(params, batch, rows, epoch)` returns the loss summed over the
/// batch elements in `rows` and its gradient per parameter vector; the step
/// uses the batch mean. With `validation`, the parameters of the epoch with
/// the lowest held-out loss are kept.
pub(crate) fn fit<Bt, MB, SL>(
    model: &str,
    params: &mut [ParamVector],
    cfg: &TrainConfig,
    rng: &mut RngStream,
    mut make_batch: MB,
    shard_loss: SL,
    validation: Option<&Validation>,
) -> Result<FitOutcome>
where
    Bt: Batch,
    MB: FnMut(usize, &mut RngStream) -> Result<Bt>,
    SL: Fn(&[ParamVector], &Bt, Range<usize>, usize) -> Result<(f64, Vec<Vec<f64>>)> + Sync,
{
    let diverged = |detail: String| Error::Training {
        model: model.to_string(),
        detail,
    };
    let mut states: Vec<AdamState> = params.iter().map(|p| AdamState::new(p.len())).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut val_losses = Vec::new();
    let mut best: Option<(f64, usize, Vec<ParamVector>)> = None;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let batch = make_batch(epoch, rng)?;
            let b = batch.len();
            let shards = cfg.grad_shards.min(b).max(1);
            let frozen: &[ParamVector] = params;
            let parts = par::map_range(shards, |k| {
                let rows = (k * b / shards)..((k + 1) * b / shards);
                shard_loss(frozen, &batch, rows, epoch)
            });
            let mut loss = 0.0;
            let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
            for part in parts {
                let (l, g) = part.map_err(|e| diverged(format!("epoch {epoch}: {e}")))?;
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, x)| *a += x);
                }
            }
            let inv = 1.0 / b as f64;
            loss *= inv;
            if !loss.is_finite() {
                return Err(diverged(format!("epoch {epoch}: non-finite loss")));
            }
            let mut flat: Vec<f64> = grads.concat();
            flat.iter_mut().for_each(|g| *g *= inv);
            clip_global_norm(&mut flat, cfg.grad_clip);
            let mut offset = 0;
            for (p, st) in params.iter_mut().zip(states.iter_mut()) {
                let g = &flat[offset..offset + p.len()];
                offset += p.len();
                adam_step(p, g, st, &cfg.adam).map_err(|e| diverged(format!("epoch {epoch}: {e}")))?;
            }
            total += loss;
        }
        epoch_losses.push(total / cfg.batches_per_epoch as f64);
        if let Some(val) = validation {
            let v = val(params).map_err(|e| diverged(format!("epoch {epoch} validation: {e}")))?;
            val_losses.push(v);
            if v.is_finite() && best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, params.to_vec()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, kept)) => {
            params.clone_from_slice(&kept);
            epoch
        }
        None => cfg.epochs - 1,
    };
    for p in params.iter() {
        p.check_finite().map_err(|e| diverged(e.to_string()))?;
    }
    Ok(FitOutcome {
        losses: epoch_losses,
        val_losses,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Backend, Init, LayoutBuilder};

    struct Rows(Vec<f64>);
    impl Batch for Rows {
        fn len(&self) -> usize {
            self.0.len()
        }
    }

    fn quadratic_fit(shards: usize) -> (Vec<f64>, ParamVector) {
        let mut b = LayoutBuilder::new();
        b.push("w", 1, 1, Init::Zeros);
        let mut params = vec![b.zeros()];
        let cfg = TrainConfig {
            epochs: 30,
            batches_per_epoch: 10,
            batch_size: 8,
            grad_shards: shards,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut rng = RngStream::new(1, 1);
        let losses = fit(
            "toy",
            &mut params,
            &cfg,
            &mut rng,
            |_, r| Ok(Rows((0..8).map(|_| 2.0 + 0.1 * r.normal()).collect())),
            |p, batch, rows, _| {
                let (v, g) = crate::numeric::value_and_grad(&[&p[0]], |gr| {
                    let w = gr.param(0, &p[0], "w")?;
                    let y = gr.constant(stack(batch.0[rows.clone()].iter().map(std::slice::from_ref)));
                    let ones = gr.constant(Tensor::filled(rows.len(), 1, 1.0));
                    let wb = gr.matmul(&ones, &w);
                    let d = gr.sub(&wb, &y);
                    Ok(gr.sum_squares(&d))
                })?;
                Ok((v, g))
            },
            None,
        )
        .unwrap();
        (losses.losses, params.remove(0))
    }

    #[test]
    fn fit_converges_and_ignores_sharding() {
        let (losses, p) = quadratic_fit(1);
        assert!((p.values()[0] - 2.0).abs() < 0.1, "{}", p.values()[0]);
        assert!(losses.last().unwrap() < &losses[0]);
        let (_, p3) = quadratic_fit(3);
        // shard sums are added in a fixed order, so only rounding differs
        assert!((p.values()[0] - p3.values()[0]).abs() < 1e-9);
    }

    #[test]
    fn validation_keeps_best_epoch() {
        let mut b = LayoutBuilder::new();
        b.push("w", 1, 1, Init::Zeros);
        let mut params = vec![b.zeros()];
        let cfg = TrainConfig {
            epochs: 20,
            batches_per_epoch: 5,
            batch_size: 4,
            adam: AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        // training pulls w towards 3, validation prefers w = 1
        let val = |p: &[ParamVector]| Ok((p[0].values()[0] - 1.0).abs());
        let out = fit(
            "toy",
            &mut params,
            &cfg,
            &mut RngStream::new(2, 2),
            |_, _| Ok(Rows(vec![3.0; 4])),
            |p, batch, rows, _| {
                let w = p[0].values()[0];
                let n = rows.len() as f64;
                let _ = batch;
                Ok((n * (w - 3.0).powi(2), vec![vec![2.0 * n * (w - 3.0)]]))
            },
            Some(&val),
        )
        .unwrap();
        let w = params[0].values()[0];
        assert_eq!(out.val_losses.len(), 20);
        assert_eq!(out.val_losses[out.best_epoch], (w - 1.0).abs());
        assert!(out.val_losses.iter().all(|v| *v >= (w - 1.0).abs()));
    }

    #[test]
    fn holdout_split_partitions_indices() {
        let mut rng = RngStream::new(3, 0);
        let (train, held) = split_holdout(10, 0.2, &mut rng);
        assert_eq!((train.len(), held.len()), (8, 2));
        let mut all: Vec<usize> = train.iter().chain(&held).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_holdout(1, 0.5, &mut rng).1.len(), 0);
        assert_eq!(split_holdout(5, 0.0, &mut rng).1.len(), 0);
    }

    #[test]
    fn config_violations_are_collected() {
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.violations("x").len(), 2);
    }
}
