//! Residual CVAE: the aleatoric part of the forecast.
//!
//! The model is trained on `ε = y_true − ŷ_m`, the gap between an observed
//! trajectory and the closed-loop rollout of a uniformly drawn ensemble
//! member under the same actions. The decoder sees that member's predicted
//! deltas, so disagreement between members is explained by the conditioning
//! rather than absorbed into the latent noise, and epistemic spread is not
//! counted twice.

use serde::{Deserialize, Serialize};

use crate::ensemble::{rollout_many, DynamicsEnsemble, TrainMeta};
use crate::env::{Normalization, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::numeric::{value_and_grad, Graph, RngStream, Tensor};
use crate::par;
use crate::residual::difference;
use crate::train::{fit, sample_windows, split_holdout, Batch};
use crate::vae::{
    build_blocks, increment_scale, prior_draws, sequence_loss, window_shard_loss, DecoderStepper, SeqVae, VaeConfig,
    VaeSeq, VaeValidation,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCvae {
    pub vae: SeqVae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    /// `ε̂_1 .. ε̂_T` in raw state units.
    pub residuals: Vec<Vec<f64>>,
    pub s0: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub member_index: usize,
}

/// `y_true − ŷ_m`.
pub fn aleatoric_residual(y_true: &[Vec<f64>], y_hat_m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    difference(y_true, y_hat_m)
}

/// Draws `n` member indices uniformly from `[0, m)`.
pub fn sample_members(rng: &mut RngStream, m: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(m)).collect()
}

/// An observed trajectory paired with one member's rollout under its actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualItem {
    /// `s_0 .. s_T`.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// `ŝ^m_1 .. ŝ^m_T`.
    pub member_states: Vec<Vec<f64>>,
}

/// Model coordinates for one residual sequence:
/// conditioning state `s_t`, member delta as auxiliary input and the
/// residual `(s_t − ŝ^m_t) / state_scale` as target.
pub(crate) fn residual_seq(norm: &Normalization, item: &ResidualItem) -> Result<VaeSeq> {
    let t = item.actions.len();
    if item.states.len() != t + 1 || item.member_states.len() != t {
        return Err(Error::dim(format!(
            "residual item: {} states, {} actions, {} member states",
            item.states.len(),
            t,
            item.member_states.len()
        )));
    }
    let scaled = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .zip(&norm.state_scale)
            .map(|((x, y), s)| (x - y) / s)
            .collect()
    };
    let mut guide = Vec::with_capacity(t + 1);
    guide.push(item.states[0].as_slice());
    guide.extend(item.member_states.iter().map(Vec::as_slice));
    let mut seq = VaeSeq {
        cond: Vec::with_capacity(t),
        action: Vec::with_capacity(t),
        aux: Vec::with_capacity(t),
        prev: Vec::with_capacity(t),
        target: Vec::with_capacity(t),
    };
    for k in 0..t {
        seq.cond.push(norm.norm_state(&item.states[k]));
        seq.action.push(norm.norm_action(&item.actions[k]));
        let d: Vec<f64> = guide[k + 1].iter().zip(guide[k]).map(|(a, b)| a - b).collect();
        seq.aux.push(norm.norm_delta(&d));
        seq.prev.push(scaled(&item.states[k], guide[k]));
        seq.target.push(scaled(&item.states[k + 1], guide[k + 1]));
    }
    Ok(seq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeLoss {
    /// Batch mean of `Σ_t (reconstruction + β · KL)`.
    pub value: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub grad_encoder: Vec<f64>,
    pub grad_decoder: Vec<f64>,
}

/// Loss and gradients on a batch of residual items, with the model's β.
/// Latent noise comes from `rng`.
pub fn cvae_loss(items: &[ResidualItem], model: &ResidualCvae, rng: &mut RngStream) -> Result<CvaeLoss> {
    let vae = &model.vae;
    let seqs = items
        .iter()
        .map(|it| residual_seq(&vae.normalization, it))
        .collect::<Result<Vec<_>>>()?;
    let len = seqs.first().map_or(0, VaeSeq::len);
    if len == 0 || seqs.iter().any(|s| s.len() != len) {
        return Err(Error::dim("residual batch needs equal, non-zero horizons"));
    }
    let idx: Vec<(usize, usize)> = (0..seqs.len()).map(|i| (i, 0)).collect();
    let blocks = build_blocks(&seqs, &idx, len, &vae.kappa);
    let noise: Vec<Tensor> = (0..len)
        .map(|_| {
            Tensor::from_vec(
                seqs.len(),
                vae.arch.latent_dim,
                rng.normals(seqs.len() * vae.arch.latent_dim),
            )
        })
        .collect();
    let mut parts = (0.0, 0.0);
    let (value, grads) = value_and_grad(&[&vae.encoder, &vae.decoder], |g: &mut Graph| {
        let lp = sequence_loss(g, &vae.arch, &vae.encoder, &vae.decoder, vae.beta, &blocks, &noise)?;
        parts = (g.scalar_value(lp.recon), g.scalar_value(lp.kl));
        Ok(lp.total)
    })?;
    let n = seqs.len() as f64;
    let mut grads = grads.into_iter();
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect();
    Ok(CvaeLoss {
        value: value / n,
        reconstruction: parts.0 / n,
        kl: parts.1 / n,
        grad_encoder: scale(grads.next().unwrap_or_default()),
        grad_decoder: scale(grads.next().unwrap_or_default()),
    })
}

struct ResidualBatch {
    /// `(sequence index, window start)`; sequence index = `traj · M + member`.
    items: Vec<(usize, usize)>,
    noise: Vec<Tensor>,
}

impl Batch for ResidualBatch {
    fn len(&self) -> usize {
        self.items.len()
    }
}

/// Residual sequences of every training trajectory against every member's
/// closed-loop rollout. The ensemble is frozen, so these rollouts are
/// computed once instead of per batch.
pub(crate) fn residual_sequences(data: &TrajectoryDataset, ens: &DynamicsEnsemble) -> Result<Vec<VaeSeq>> {
    let s0: Vec<Vec<f64>> = data.trajectories.iter().map(|t| t.states[0].clone()).collect();
    let acts: Vec<&[Vec<f64>]> = data.trajectories.iter().map(|t| t.actions.as_slice()).collect();
    let per_member = par::try_map_range(ens.len(), |m| rollout_many(ens, m, &s0, &acts))?;
    let m = ens.len();
    let mut seqs = Vec::with_capacity(data.len() * m);
    for (i, tr) in data.trajectories.iter().enumerate() {
        for rollouts in per_member.iter().take(m) {
            let (states, _) = &rollouts[i];
            let item = ResidualItem {
                states: tr.states.clone(),
                actions: tr.actions.clone(),
                member_states: states[1..].to_vec(),
            };
            seqs.push(residual_seq(&data.normalization, &item)?);
        }
    }
    Ok(seqs)
}

/// Trains the residual CVAE.
///
/// Every batch draws windows of observed trajectories, pairs each element
/// with a member drawn uniformly from `[0, M)` by a dedicated stream, and
/// takes one optimizer step on the loss of the resulting residuals.
pub fn train_residual_cvae(
    data: &TrajectoryDataset,
    ens: &DynamicsEnsemble,
    cfg: &VaeConfig,
    seed: u64,
) -> Result<ResidualCvae> {
    let v = cfg.violations("aleatoric");
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if ens.normalization != data.normalization {
        return Err(Error::config(
            "ensemble and dataset normalizations differ; train both on the same dataset",
        ));
    }
    ens.validate()?;
    let (ds, da) = (data.state_dim(), data.action_dim());
    let arch = cfg.arch(ds, da);
    let seqs = residual_sequences(data, ens)?;
    let kappa = increment_scale(&seqs, ds, cfg.likelihood_scale);
    let m = ens.len();
    let horizon = data.horizon();
    let len = cfg.train.window_len(horizon);
    let root = RngStream::labeled(seed, "residual-cvae");
    let (enc, dec) = arch.init(&mut root.fork_labeled("init"));
    let mut params = vec![enc, dec];
    let mut member_rng = root.fork_labeled("members");
    let mut noise_rng = root.fork_labeled("latent");
    let mut batch_rng = root.fork_labeled("batches");
    let (train_idx, held) = split_holdout(data.len(), cfg.train.holdout, &mut root.fork_labeled("holdout"));
    let held_seqs: Vec<usize> = held.iter().flat_map(|&i| (0..m).map(move |mi| i * m + mi)).collect();
    let validation = VaeValidation::new(
        &held_seqs,
        horizon,
        len,
        arch.latent_dim,
        &mut root.fork_labeled("validation"),
    );
    let val = |p: &[crate::numeric::ParamVector]| validation.loss(&arch, p, &seqs, &kappa, cfg.beta);
    let out = fit(
        "residual-cvae",
        &mut params,
        &cfg.train,
        &mut batch_rng,
        |_, rng| {
            let windows = sample_windows(rng, &train_idx, horizon, len, cfg.train.batch_size);
            let members = sample_members(&mut member_rng, m, windows.len());
            let items = windows
                .iter()
                .zip(members)
                .map(|(w, mi)| (w.traj * m + mi, w.start))
                .collect::<Vec<_>>();
            let noise = (0..len)
                .map(|_| {
                    let n = items.len() * arch.latent_dim;
                    Tensor::from_vec(items.len(), arch.latent_dim, noise_rng.normals(n))
                })
                .collect();
            Ok(ResidualBatch { items, noise })
        },
        |p, batch, rows, epoch| {
            window_shard_loss(
                &arch,
                p,
                &seqs,
                &batch.items[rows.clone()],
                &batch.noise,
                rows,
                len,
                &kappa,
                cfg.beta_at(epoch),
            )
        },
        (!validation.is_empty()).then_some(&val as &_),
    )?;
    Ok(ResidualCvae {
        vae: SeqVae {
            arch,
            encoder: params.remove(0),
            decoder: params.remove(0),
            beta: cfg.beta,
            kappa,
            normalization: data.normalization.clone(),
            train_meta: TrainMeta::from_fits(data, seed, cfg.train.epochs, &[&out]),
        },
    })
}

/// Batched residual generation conditioned on member rollouts.
pub struct ResidualStepper<'a> {
    model: &'a ResidualCvae,
    dec: DecoderStepper<'a>,
}

impl<'a> ResidualStepper<'a> {
    pub fn new(model: &'a ResidualCvae, rows: usize) -> Result<Self> {
        Ok(Self {
            model,
            dec: DecoderStepper::new(&model.vae, rows)?,
        })
    }

    /// One step for every row. `guide_now`/`guide_next` are the member
    /// states `ŝ^m_t`, `ŝ^m_{t+1}`; `residual` is `ε̂_t`. Returns `ε̂_{t+1}`.
    pub fn step(
        &mut self,
        guide_now: &[Vec<f64>],
        guide_next: &[Vec<f64>],
        residual: &[Vec<f64>],
        actions: &[Vec<f64>],
        z: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let norm = &self.model.vae.normalization;
        let rows = guide_now.len();
        let mut cond = Vec::with_capacity(rows);
        let mut act = Vec::with_capacity(rows);
        let mut aux = Vec::with_capacity(rows);
        let mut prev = Vec::with_capacity(rows);
        for r in 0..rows {
            let composed: Vec<f64> = guide_now[r].iter().zip(&residual[r]).map(|(a, b)| a + b).collect();
            cond.push(norm.norm_state(&composed));
            act.push(norm.norm_action(&actions[r]));
            let d: Vec<f64> = guide_next[r].iter().zip(&guide_now[r]).map(|(a, b)| a - b).collect();
            aux.push(norm.norm_delta(&d));
            prev.push(residual[r].iter().zip(&norm.state_scale).map(|(e, s)| e / s).collect());
        }
        let next = self.dec.step(&cond, &act, &aux, &prev, z);
        next.into_iter()
            .map(|y| y.iter().zip(&norm.state_scale).map(|(v, s)| v * s).collect())
            .collect()
    }
}

/// Generates one residual sequence with `z_t` from the prior, conditioning
/// on `ŝ^m_t + ε̂_t` along the member rollout `guide_states` (`ŝ_1..ŝ_T`).
pub fn sample_residuals(
    model: &ResidualCvae,
    member_index: usize,
    s0: &[f64],
    actions: &[Vec<f64>],
    guide_states: &[Vec<f64>],
    rng: &mut RngStream,
) -> Result<ResidualSample> {
    let arch = &model.vae.arch;
    if s0.len() != arch.state_dim
        || guide_states.len() != actions.len()
        || guide_states.iter().any(|s| s.len() != arch.state_dim)
        || actions.iter().any(|a| a.len() != arch.action_dim)
    {
        return Err(Error::dim("sample_residuals inputs disagree in shape"));
    }
    let mut stepper = ResidualStepper::new(model, 1)?;
    let mut eps = vec![vec![0.0; arch.state_dim]];
    let mut now = vec![s0.to_vec()];
    let mut out = Vec::with_capacity(actions.len());
    let mut rngs = [rng.clone()];
    for (a, g) in actions.iter().zip(guide_states) {
        let z = prior_draws(&mut rngs, arch.latent_dim);
        let next_guide = vec![g.clone()];
        eps = stepper.step(&now, &next_guide, &eps, std::slice::from_ref(a), &z);
        out.push(eps[0].clone());
        now = next_guide;
    }
    *rng = rngs[0].clone();
    Ok(ResidualSample {
        residuals: out,
        s0: s0.to_vec(),
        actions: actions.to_vec(),
        member_index,
    })
}
