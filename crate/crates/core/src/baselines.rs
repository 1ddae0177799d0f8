//! Comparison models: a feed-forward Gaussian one-step model and a VAE
//! trained on states directly.

use serde::{Deserialize, Serialize};

use crate::ensemble::TrainMeta;
use crate::env::{Normalization, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::numeric::{
    value_and_grad, Backend, Eval, Graph, Init, LayoutBuilder, Linear, Mlp, ParamVector, RngStream, Tensor, LOGVAR_MAX,
    LOGVAR_MIN,
};
use crate::train::{fit, sample_windows, split_holdout, stack, Batch, NormSeq, TrainConfig};
use crate::vae::{
    increment_scale, prior_draws, window_shard_loss, DecoderStepper, SeqVae, VaeConfig, VaeSeq, VaeValidation,
};

// ---------------------------------------------------------------------------
// probabilistic MLP

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMlpArch {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
}

impl ProbMlpArch {
    fn nets(&self) -> (Mlp, Linear) {
        let input = self.state_dim + self.action_dim;
        (
            Mlp::new("pm", input, &self.hidden, 2 * self.state_dim),
            Linear::new("pm.skip", input, 2 * self.state_dim),
        )
    }

    fn builder(&self) -> LayoutBuilder {
        let (mlp, skip) = self.nets();
        let mut b = LayoutBuilder::new();
        mlp.declare(&mut b, 0.1);
        skip.declare(&mut b, Init::Uniform(0.01));
        b
    }

    pub fn zeros(&self) -> ParamVector {
        self.builder().zeros()
    }

    /// Normalized delta mean and soft-clamped log-variance for a batch of
    /// normalized `[s | a]` rows.
    fn forward<B: Backend>(&self, be: &mut B, p: &ParamVector, x: &B::V) -> Result<(B::V, B::V)> {
        let (mlp, skip) = self.nets();
        let y = mlp.bind(be, 0, p)?.forward(be, x);
        let s = skip.bind(be, 0, p)?.forward(be, x);
        let out = be.add(&y, &s);
        let ds = self.state_dim;
        let mean = be.slice_cols(&out, 0, ds);
        let raw = be.slice_cols(&out, ds, 2 * ds);
        Ok((mean, be.soft_clamp(&raw, LOGVAR_MIN, LOGVAR_MAX)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMlpConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ProbMlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbMlp {
    pub params: ParamVector,
    pub arch: ProbMlpArch,
    pub normalization: Normalization,
    pub train_meta: TrainMeta,
}

impl ProbMlp {
    pub fn validate(&self) -> Result<()> {
        if self.params.layout() != self.arch.zeros().layout() {
            return Err(Error::dim("prob-mlp parameters do not match the architecture"));
        }
        self.params.check_finite()?;
        self.normalization.validate()
    }

    /// Predicted one-step distribution of the raw state delta:
    /// `(mean, log-variance in normalized units)` per row.
    pub fn predict(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
        let x: Vec<Vec<f64>> = states
            .iter()
            .zip(actions)
            .map(|(s, a)| {
                let mut v = self.normalization.norm_state(s);
                v.extend(self.normalization.norm_action(a));
                v
            })
            .collect();
        let x = stack(x.iter().map(Vec::as_slice));
        self.arch.forward(&mut Eval, &self.params, &x)
    }

    /// Predicted per-dimension std of the next state, in raw units.
    pub fn predicted_std(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let (_, lv) = self.predict(&[state.to_vec()], &[action.to_vec()])?;
        Ok(lv
            .row_slice(0)
            .iter()
            .zip(&self.normalization.delta_scale)
            .map(|(l, s)| (0.5 * l).exp() * s)
            .collect())
    }

    /// One sampling step per row with the given standard-normal draws.
    pub fn step(&self, states: &[Vec<f64>], actions: &[Vec<f64>], noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (mean, lv) = self.predict(states, actions)?;
        Ok(states
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let d: Vec<f64> = mean
                    .row_slice(r)
                    .iter()
                    .zip(lv.row_slice(r))
                    .zip(&noise[r])
                    .map(|((m, l), e)| m + (0.5 * l).exp() * e)
                    .collect();
                let raw = self.normalization.denorm_delta(&d);
                s.iter().zip(&raw).map(|(a, b)| a + b).collect()
            })
            .collect())
    }
}

struct TransitionBatch {
    x: Tensor,
    y: Tensor,
}

impl Batch for TransitionBatch {
    fn len(&self) -> usize {
        self.x.rows()
    }
}

fn transitions(seqs: &[NormSeq], picks: &[(usize, usize)]) -> TransitionBatch {
    let x: Vec<Vec<f64>> = picks
        .iter()
        .map(|&(i, t)| {
            let mut v = seqs[i].states[t].clone();
            v.extend_from_slice(&seqs[i].actions[t]);
            v
        })
        .collect();
    TransitionBatch {
        x: stack(x.iter().map(Vec::as_slice)),
        y: stack(picks.iter().map(|&(i, t)| seqs[i].deltas[t].as_slice())),
    }
}

/// Gaussian negative log-likelihood of normalized one-step deltas, up to the
/// constant, summed over rows and averaged over dimensions.
fn nll<B: Backend>(be: &mut B, arch: &ProbMlpArch, p: &ParamVector, x: &Tensor, y: &Tensor) -> Result<B::V> {
    let xv = be.constant(x.clone());
    let (mean, lv) = arch.forward(be, p, &xv)?;
    let yv = be.constant(y.clone());
    let err = be.sub(&mean, &yv);
    let sq = be.mul(&err, &err);
    let neg = be.scale(&lv, -1.0);
    let prec = be.exp(&neg);
    let weighted = be.mul(&sq, &prec);
    let per = be.add(&weighted, &lv);
    let total = be.sum(&per);
    Ok(be.scale(&total, 0.5 / arch.state_dim as f64))
}

/// Trains on teacher-forced one-step transitions. Each batch holds
/// `batch_size × window` transitions, matching the step count the sequence
/// models see per batch.
pub fn train_prob_mlp(data: &TrajectoryDataset, cfg: &ProbMlpConfig, seed: u64) -> Result<ProbMlp> {
    cfg.train.validate("prob_mlp")?;
    if data.is_empty() {
        return Err(Error::InsufficientSamples("empty training dataset".into()));
    }
    let arch = ProbMlpArch {
        state_dim: data.state_dim(),
        action_dim: data.action_dim(),
        hidden: cfg.hidden.clone(),
    };
    let seqs: Vec<NormSeq> = data
        .trajectories
        .iter()
        .map(|t| NormSeq::new(t, &data.normalization))
        .collect();
    let horizon = data.horizon();
    let rows = cfg.train.batch_size * cfg.train.window_len(horizon);
    let root = RngStream::labeled(seed, "prob-mlp");
    let mut params = vec![arch.builder().build(&mut root.fork_labeled("init"))];
    let (train_idx, held) = split_holdout(seqs.len(), cfg.train.holdout, &mut root.fork_labeled("holdout"));
    let held_pairs: Vec<(usize, usize)> = held.iter().flat_map(|&i| (0..horizon).map(move |t| (i, t))).collect();
    let val_batch = transitions(&seqs, &held_pairs);
    let val = |p: &[ParamVector]| {
        let v = nll(&mut Eval, &arch, &p[0], &val_batch.x, &val_batch.y)?;
        Ok(v.get(0, 0) / held_pairs.len() as f64)
    };
    let out = fit(
        "prob-mlp",
        &mut params,
        &cfg.train,
        &mut root.fork_labeled("batches"),
        |_, rng| {
            let picks: Vec<(usize, usize)> = (0..rows)
                .map(|_| (train_idx[rng.below(train_idx.len())], rng.below(horizon)))
                .collect();
            Ok(transitions(&seqs, &picks))
        },
        |p, batch, range, _| {
            let idx: Vec<usize> = range.collect();
            let x = batch.x.select_rows(&idx);
            let y = batch.y.select_rows(&idx);
            value_and_grad(&[&p[0]], |g: &mut Graph| nll(g, &arch, &p[0], &x, &y))
        },
        (!held_pairs.is_empty()).then_some(&val as &_),
    )?;
    Ok(ProbMlp {
        params: params.remove(0),
        arch,
        normalization: data.normalization.clone(),
        train_meta: TrainMeta::from_fits(data, seed, cfg.train.epochs, &[&out]),
    })
}

fn check_shapes(ds: usize, da: usize, s0: &[f64], actions: &[Vec<f64>]) -> Result<()> {
    if s0.len() != ds || actions.iter().any(|a| a.len() != da) {
        return Err(Error::dim(format!("expected state {ds} / action {da}")));
    }
    Ok(())
}

/// Autoregressive rollout with explicit standard-normal draws per step.
pub fn prob_mlp_rollout_with_noise(
    model: &ProbMlp,
    s0: &[f64],
    actions: &[Vec<f64>],
    noise: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    check_shapes(model.arch.state_dim, model.arch.action_dim, s0, actions)?;
    if noise.len() != actions.len() {
        return Err(Error::dim("one noise vector per action is required"));
    }
    let mut s = s0.to_vec();
    let mut out = Vec::with_capacity(actions.len());
    for (a, e) in actions.iter().zip(noise) {
        s = model
            .step(&[s], std::slice::from_ref(a), std::slice::from_ref(e))?
            .remove(0);
        out.push(s.clone());
    }
    Ok(out)
}

/// Samples each next state from the predicted Gaussian and feeds it back.
/// Returns `ŝ_1 .. ŝ_T`.
pub fn prob_mlp_rollout(
    model: &ProbMlp,
    s0: &[f64],
    actions: &[Vec<f64>],
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    let noise: Vec<Vec<f64>> = actions.iter().map(|_| rng.normals(model.arch.state_dim)).collect();
    prob_mlp_rollout_with_noise(model, s0, actions, &noise)
}

// ---------------------------------------------------------------------------
// full VAE

#[derive(Clone, Debug, PartialEq)]
pub struct FullVae {
    pub vae: SeqVae,
}

/// Model coordinates for the state-level VAE: the target is the normalized
/// state itself and the auxiliary input is the previous observed delta.
pub(crate) fn full_seq(norm: &Normalization, states: &[Vec<f64>], actions: &[Vec<f64>]) -> VaeSeq {
    let t = actions.len();
    let z: Vec<Vec<f64>> = states.iter().map(|s| norm.norm_state(s)).collect();
    let mut seq = VaeSeq {
        cond: Vec::with_capacity(t),
        action: Vec::with_capacity(t),
        aux: Vec::with_capacity(t),
        prev: Vec::with_capacity(t),
        target: Vec::with_capacity(t),
    };
    for k in 0..t {
        seq.cond.push(z[k].clone());
        seq.action.push(norm.norm_action(&actions[k]));
        seq.aux.push(previous_delta(norm, states, k));
        seq.prev.push(z[k].clone());
        seq.target.push(z[k + 1].clone());
    }
    seq
}

fn previous_delta(norm: &Normalization, states: &[Vec<f64>], k: usize) -> Vec<f64> {
    if k == 0 {
        vec![0.0; norm.state_dim()]
    } else {
        let d: Vec<f64> = states[k].iter().zip(&states[k - 1]).map(|(a, b)| a - b).collect();
        norm.norm_delta(&d)
    }
}

struct WindowItems {
    items: Vec<(usize, usize)>,
    noise: Vec<Tensor>,
}

impl Batch for WindowItems {
    fn len(&self) -> usize {
        self.items.len()
    }
}

/// Same machinery and architecture as the residual CVAE, with
/// `s_{t+1}` as the reconstruction target and no ensemble.
pub fn train_full_vae(data: &TrajectoryDataset, cfg: &VaeConfig, seed: u64) -> Result<FullVae> {
    let v = cfg.violations("full_vae");
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if data.is_empty() {
        return Err(Error::InsufficientSamples("empty training dataset".into()));
    }
    let (ds, da) = (data.state_dim(), data.action_dim());
    let arch = cfg.arch(ds, da);
    let seqs: Vec<VaeSeq> = data
        .trajectories
        .iter()
        .map(|t| full_seq(&data.normalization, &t.states, &t.actions))
        .collect();
    let kappa = increment_scale(&seqs, ds, cfg.likelihood_scale);
    let horizon = data.horizon();
    let len = cfg.train.window_len(horizon);
    let root = RngStream::labeled(seed, "full-vae");
    let (enc, dec) = arch.init(&mut root.fork_labeled("init"));
    let mut params = vec![enc, dec];
    let mut noise_rng = root.fork_labeled("latent");
    let (train_idx, held) = split_holdout(seqs.len(), cfg.train.holdout, &mut root.fork_labeled("holdout"));
    let validation = VaeValidation::new(
        &held,
        horizon,
        len,
        arch.latent_dim,
        &mut root.fork_labeled("validation"),
    );
    let val = |p: &[ParamVector]| validation.loss(&arch, p, &seqs, &kappa, cfg.beta);
    let out = fit(
        "full-vae",
        &mut params,
        &cfg.train,
        &mut root.fork_labeled("batches"),
        |_, rng| {
            let items: Vec<(usize, usize)> = sample_windows(rng, &train_idx, horizon, len, cfg.train.batch_size)
                .into_iter()
                .map(|w| (w.traj, w.start))
                .collect();
            let noise = (0..len)
                .map(|_| {
                    let n = items.len() * arch.latent_dim;
                    Tensor::from_vec(items.len(), arch.latent_dim, noise_rng.normals(n))
                })
                .collect();
            Ok(WindowItems { items, noise })
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
    Ok(FullVae {
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

/// Batched closed-loop generation with the full VAE.
pub struct FullVaeStepper<'a> {
    model: &'a FullVae,
    dec: DecoderStepper<'a>,
}

impl<'a> FullVaeStepper<'a> {
    pub fn new(model: &'a FullVae, rows: usize) -> Result<Self> {
        Ok(Self {
            model,
            dec: DecoderStepper::new(&model.vae, rows)?,
        })
    }

    /// `prev` holds `ŝ_{t−1}` per row, or `None` at the first step.
    pub fn step(
        &mut self,
        now: &[Vec<f64>],
        prev: Option<&[Vec<f64>]>,
        actions: &[Vec<f64>],
        z: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let norm = &self.model.vae.normalization;
        let cond: Vec<Vec<f64>> = now.iter().map(|s| norm.norm_state(s)).collect();
        let act: Vec<Vec<f64>> = actions.iter().map(|a| norm.norm_action(a)).collect();
        let aux: Vec<Vec<f64>> = match prev {
            None => vec![vec![0.0; norm.state_dim()]; now.len()],
            Some(p) => now
                .iter()
                .zip(p)
                .map(|(a, b)| {
                    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                    norm.norm_delta(&d)
                })
                .collect(),
        };
        let next = self.dec.step(&cond, &act, &aux, &cond, z);
        next.iter().map(|y| norm.denorm_state(y)).collect()
    }
}

/// Samples `z_t` from the prior and rolls the decoder closed-loop.
/// Returns `ŝ_1 .. ŝ_T`.
pub fn full_vae_forecast(
    model: &FullVae,
    s0: &[f64],
    actions: &[Vec<f64>],
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    check_shapes(model.vae.arch.state_dim, model.vae.arch.action_dim, s0, actions)?;
    let mut stepper = FullVaeStepper::new(model, 1)?;
    let mut rngs = [rng.clone()];
    let mut prev: Option<Vec<Vec<f64>>> = None;
    let mut now = vec![s0.to_vec()];
    let mut out = Vec::with_capacity(actions.len());
    for a in actions {
        let z = prior_draws(&mut rngs, model.vae.arch.latent_dim);
        let next = stepper.step(&now, prev.as_deref(), std::slice::from_ref(a), &z);
        out.push(next[0].clone());
        prev = Some(std::mem::replace(&mut now, next));
    }
    *rng = rngs[0].clone();
    Ok(out)
}
