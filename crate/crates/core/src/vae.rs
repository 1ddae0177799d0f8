//! Recurrent conditional VAE over per-step target increments.
//!
//! Shared by the residual CVAE and the full-VAE baseline, which differ only
//! in what the target sequence is. At every step the model sees a
//! conditioning state, the action, an auxiliary vector and the previous
//! target value `y_t`, and scores the next value as
//!
//! ```text
//! ŷ_{t+1} = y_t + κ ⊙ decoder(cond_t, a_t, aux_t, z_t)
//! ```
//!
//! `κ` is the likelihood scale: reconstruction is the squared error of
//! `ŷ_{t+1} − y_{t+1}` measured in units of `κ`. The encoder sees the true
//! increment `(y_{t+1} − y_t) / κ` and emits `q(z_t | ·)`.

use serde::{Deserialize, Serialize};

use crate::ensemble::{sum_all, TrainMeta};
use crate::env::Normalization;
use crate::error::{Error, Result};
use crate::numeric::gaussian::{kl_to_standard_normal_v, reparameterize_v};
use crate::numeric::nn::BoundSeqNet;
use crate::numeric::{
    value_and_grad, Backend, Eval, Graph, LayoutBuilder, ParamVector, RngStream, SeqNet, Tensor, LOGVAR_MAX, LOGVAR_MIN,
};
use crate::train::{stack, tiling_windows, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub head_hidden: usize,
}

impl VaeArch {
    /// Input: conditioning state, action, auxiliary vector, previous target,
    /// target increment.
    pub fn encoder(&self) -> SeqNet {
        let input = 4 * self.state_dim + self.action_dim;
        SeqNet::new("enc", input, self.hidden, self.head_hidden, 2 * self.latent_dim)
    }

    /// Input: conditioning state, action, auxiliary vector, previous target,
    /// latent.
    pub fn decoder(&self) -> SeqNet {
        let input = 3 * self.state_dim + self.action_dim + self.latent_dim;
        SeqNet::new("dec", input, self.hidden, self.head_hidden, self.state_dim)
    }

    fn encoder_builder(&self) -> LayoutBuilder {
        let mut b = LayoutBuilder::new();
        self.encoder().declare(&mut b, 0.1);
        b
    }

    fn decoder_builder(&self) -> LayoutBuilder {
        let mut b = LayoutBuilder::new();
        self.decoder().declare(&mut b, 0.1);
        b
    }

    pub fn init(&self, rng: &mut RngStream) -> (ParamVector, ParamVector) {
        let enc = self.encoder_builder().build(&mut rng.fork_labeled("encoder"));
        let dec = self.decoder_builder().build(&mut rng.fork_labeled("decoder"));
        (enc, dec)
    }

    pub fn zeros(&self) -> (ParamVector, ParamVector) {
        (self.encoder_builder().zeros(), self.decoder_builder().zeros())
    }
}

/// Model and training settings shared by both VAE variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    /// KL weight after warm-up.
    pub beta: f64,
    /// Fraction of epochs over which β ramps linearly from 0.
    pub beta_warmup: f64,
    /// `κ` as a multiple of the per-dimension std of target increments.
    pub likelihood_scale: f64,
    pub train: TrainConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: 32,
            head_hidden: 32,
            beta: 0.5,
            beta_warmup: 0.2,
            likelihood_scale: 0.25,
            train: TrainConfig::default(),
        }
    }
}

impl VaeConfig {
    pub fn violations(&self, section: &str) -> Vec<String> {
        let mut v = self.train.violations(section);
        if self.latent_dim == 0 {
            v.push(format!("{section}.latent_dim must be >= 1"));
        }
        if self.hidden == 0 || self.head_hidden == 0 {
            v.push(format!("{section} hidden sizes must be >= 1"));
        }
        if !(self.beta >= 0.0) {
            v.push(format!("{section}.beta must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.beta_warmup) {
            v.push(format!("{section}.beta_warmup must lie in [0, 1]"));
        }
        if !(self.likelihood_scale > 0.0) {
            v.push(format!("{section}.likelihood_scale must be > 0"));
        }
        v
    }

    pub fn arch(&self, state_dim: usize, action_dim: usize) -> VaeArch {
        VaeArch {
            state_dim,
            action_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            head_hidden: self.head_hidden,
        }
    }

    /// β in force during `epoch`.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        let warm = (self.beta_warmup * self.train.epochs as f64).round() as usize;
        if warm == 0 {
            self.beta
        } else {
            self.beta * (epoch as f64 / warm as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqVae {
    pub arch: VaeArch,
    pub encoder: ParamVector,
    pub decoder: ParamVector,
    pub beta: f64,
    /// Likelihood scale per state dimension, in normalized state units.
    pub kappa: Vec<f64>,
    pub normalization: Normalization,
    pub train_meta: TrainMeta,
}

impl SeqVae {
    pub fn validate(&self) -> Result<()> {
        if self.arch.latent_dim == 0 {
            return Err(Error::config("latent_dim must be >= 1"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta must be >= 0"));
        }
        if self.kappa.len() != self.arch.state_dim || self.kappa.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::config("likelihood scale must be positive per state dimension"));
        }
        let (e, d) = self.arch.zeros();
        if self.encoder.layout() != e.layout() || self.decoder.layout() != d.layout() {
            return Err(Error::dim("VAE parameters do not match the architecture"));
        }
        self.encoder.check_finite()?;
        self.decoder.check_finite()?;
        self.normalization.validate()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }
}

/// One training sequence in model coordinates; `target[t]` is `y_{t+1}` and
/// `prev[t]` is `y_t`.
#[derive(Clone, Debug)]
pub(crate) struct VaeSeq {
    pub cond: Vec<Vec<f64>>,
    pub action: Vec<Vec<f64>>,
    pub aux: Vec<Vec<f64>>,
    pub prev: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

impl VaeSeq {
    pub fn len(&self) -> usize {
        self.target.len()
    }
}

/// Per-dimension std of `target − prev` over every step of `seqs`, times
/// `scale`, floored at 1e-6.
pub(crate) fn increment_scale(seqs: &[VaeSeq], dim: usize, scale: f64) -> Vec<f64> {
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    for s in seqs {
        for (p, t) in s.prev.iter().zip(&s.target) {
            n += 1;
            for k in 0..dim {
                mean[k] += t[k] - p[k];
            }
        }
    }
    let n = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for s in seqs {
        for (p, t) in s.prev.iter().zip(&s.target) {
            for k in 0..dim {
                var[k] += (t[k] - p[k] - mean[k]).powi(2);
            }
        }
    }
    var.iter().map(|v| (scale * (v / n).sqrt()).max(1e-6)).collect()
}

/// Per-step matrices for a batch of windows.
pub(crate) struct StepBlock {
    pub cond: Tensor,
    pub action: Tensor,
    pub aux: Tensor,
    pub prev: Tensor,
    /// `(y_{t+1} − y_t) / κ`.
    pub increment: Tensor,
}

/// Stacks `len` steps of the windows `(seq, start)`.
pub(crate) fn build_blocks(seqs: &[VaeSeq], items: &[(usize, usize)], len: usize, kappa: &[f64]) -> Vec<StepBlock> {
    (0..len)
        .map(|k| {
            let inc: Vec<Vec<f64>> = items
                .iter()
                .map(|&(i, s)| {
                    let sq = &seqs[i];
                    sq.target[s + k]
                        .iter()
                        .zip(&sq.prev[s + k])
                        .zip(kappa)
                        .map(|((t, p), c)| (t - p) / c)
                        .collect()
                })
                .collect();
            StepBlock {
                cond: stack(items.iter().map(|&(i, s)| seqs[i].cond[s + k].as_slice())),
                action: stack(items.iter().map(|&(i, s)| seqs[i].action[s + k].as_slice())),
                aux: stack(items.iter().map(|&(i, s)| seqs[i].aux[s + k].as_slice())),
                prev: stack(items.iter().map(|&(i, s)| seqs[i].prev[s + k].as_slice())),
                increment: stack(inc.iter().map(Vec::as_slice)),
            }
        })
        .collect()
}

pub(crate) struct LossParts<V> {
    pub total: V,
    pub recon: V,
    pub kl: V,
}

/// `Σ_t Σ_rows [ ‖decoder output − increment‖² + β · KL(q(z_t) ‖ N(0, I)) ]`.
///
/// `noise[t]` holds the reparameterisation draws for step `t`.
pub(crate) fn sequence_loss<B: Backend>(
    be: &mut B,
    arch: &VaeArch,
    enc_p: &ParamVector,
    dec_p: &ParamVector,
    beta: f64,
    blocks: &[StepBlock],
    noise: &[Tensor],
) -> Result<LossParts<B::V>> {
    let enc = arch.encoder().bind(be, 0, enc_p)?;
    let dec = arch.decoder().bind(be, 1, dec_p)?;
    let rows = blocks.first().map_or(0, |b| b.cond.rows());
    let l = arch.latent_dim;
    let mut he = be.constant(Tensor::zeros(rows, arch.hidden));
    let mut hd = be.constant(Tensor::zeros(rows, arch.hidden));
    let mut recon_terms = Vec::with_capacity(blocks.len());
    let mut kl_terms = Vec::with_capacity(blocks.len());
    for (blk, eps) in blocks.iter().zip(noise) {
        let base = Tensor::concat_cols(&[&blk.cond, &blk.action, &blk.aux, &blk.prev]);
        let enc_x = be.constant(Tensor::concat_cols(&[&base, &blk.increment]));
        let (q, he2) = enc.step(be, &enc_x, &he);
        he = he2;
        let mean = be.slice_cols(&q, 0, l);
        let raw_lv = be.slice_cols(&q, l, 2 * l);
        let logvar = be.soft_clamp(&raw_lv, LOGVAR_MIN, LOGVAR_MAX);
        let z = reparameterize_v(be, &mean, &logvar, eps);
        let base_v = be.constant(base);
        let dec_x = be.concat_cols(&[&base_v, &z]);
        let (out, hd2) = dec.step(be, &dec_x, &hd);
        hd = hd2;
        let target = be.constant(blk.increment.clone());
        let err = be.sub(&out, &target);
        recon_terms.push(be.sum_squares(&err));
        kl_terms.push(kl_to_standard_normal_v(be, &mean, &logvar));
    }
    let recon = sum_all(be, &recon_terms);
    let kl = sum_all(be, &kl_terms);
    let weighted = be.scale(&kl, beta);
    let total = be.add(&recon, &weighted);
    Ok(LossParts { total, recon, kl })
}

/// Loss of a shard of window items, averaged over window steps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn window_shard_loss(
    arch: &VaeArch,
    p: &[ParamVector],
    seqs: &[VaeSeq],
    items: &[(usize, usize)],
    noise: &[Tensor],
    rows: std::ops::Range<usize>,
    len: usize,
    kappa: &[f64],
    beta: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let blocks = build_blocks(seqs, items, len, kappa);
    let eps: Vec<Tensor> = noise
        .iter()
        .map(|t| t.select_rows(&rows.clone().collect::<Vec<_>>()))
        .collect();
    let (v, g) = value_and_grad(&[&p[0], &p[1]], |gr: &mut Graph| {
        let lp = sequence_loss(gr, arch, &p[0], &p[1], beta, &blocks, &eps)?;
        Ok(Backend::scale(gr, &lp.total, 1.0 / len as f64))
    })?;
    Ok((v, g))
}

/// Fixed held-out items and latent noise for model selection.
pub(crate) struct VaeValidation {
    items: Vec<(usize, usize)>,
    noise: Vec<Tensor>,
    len: usize,
}

impl VaeValidation {
    /// Tiles every sequence in `seq_ids` with non-overlapping windows.
    pub fn new(seq_ids: &[usize], horizon: usize, len: usize, latent: usize, rng: &mut RngStream) -> Self {
        let items: Vec<(usize, usize)> = tiling_windows(seq_ids, horizon, len)
            .into_iter()
            .map(|w| (w.traj, w.start))
            .collect();
        let noise = (0..len)
            .map(|_| Tensor::from_vec(items.len(), latent, rng.normals(items.len() * latent)))
            .collect();
        Self { items, noise, len }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Mean per-item loss, averaged over window steps, at the full KL weight.
    pub fn loss(&self, arch: &VaeArch, p: &[ParamVector], seqs: &[VaeSeq], kappa: &[f64], beta: f64) -> Result<f64> {
        let blocks = build_blocks(seqs, &self.items, self.len, kappa);
        let lp = sequence_loss(&mut Eval, arch, &p[0], &p[1], beta, &blocks, &self.noise)?;
        Ok(lp.total.get(0, 0) / (self.len * self.items.len()) as f64)
    }
}

/// Batched generation with the decoder; row `i` of every call belongs to
/// the same sample.
pub struct DecoderStepper<'a> {
    vae: &'a SeqVae,
    net: BoundSeqNet<Tensor>,
    h: Tensor,
}

impl<'a> DecoderStepper<'a> {
    pub fn new(vae: &'a SeqVae, rows: usize) -> Result<Self> {
        let net = vae.arch.decoder().bind(&mut Eval, 1, &vae.decoder)?;
        Ok(Self {
            vae,
            net,
            h: Tensor::zeros(rows, vae.arch.hidden),
        })
    }

    /// Returns `y_{t+1} = y_t + κ ⊙ decoder(...)` per row. All inputs are in
    /// model coordinates.
    pub fn step(
        &mut self,
        cond: &[Vec<f64>],
        action: &[Vec<f64>],
        aux: &[Vec<f64>],
        prev: &[Vec<f64>],
        z: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let x: Vec<Vec<f64>> = (0..cond.len())
            .map(|r| {
                let mut v = Vec::with_capacity(self.net_input());
                v.extend_from_slice(&cond[r]);
                v.extend_from_slice(&action[r]);
                v.extend_from_slice(&aux[r]);
                v.extend_from_slice(&prev[r]);
                v.extend_from_slice(&z[r]);
                v
            })
            .collect();
        let x = stack(x.iter().map(Vec::as_slice));
        let (o, h) = self.net.step(&mut Eval, &x, &self.h);
        self.h = h;
        prev.iter()
            .enumerate()
            .map(|(r, p)| {
                p.iter()
                    .zip(o.row_slice(r))
                    .zip(&self.vae.kappa)
                    .map(|((y, o), k)| y + k * o)
                    .collect()
            })
            .collect()
    }

    fn net_input(&self) -> usize {
        3 * self.vae.arch.state_dim + self.vae.arch.action_dim + self.vae.arch.latent_dim
    }
}

/// Prior draws `z ~ N(0, I)` for one step of every row.
pub(crate) fn prior_draws(rngs: &mut [RngStream], latent: usize) -> Vec<Vec<f64>> {
    rngs.iter_mut().map(|r| r.normals(latent)).collect()
}
