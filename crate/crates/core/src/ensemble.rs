//! Deep ensemble of recurrent one-step dynamics models.
//!
//! Each member maps `(normalized s_t, normalized a_t)` and its recurrent
//! state to a normalized state delta. Spread across members is the
//! epistemic part of forecast uncertainty.

use serde::{Deserialize, Serialize};

use crate::env::{Normalization, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::numeric::nn::BoundSeqNet;
use crate::numeric::{value_and_grad, Backend, Eval, Graph, LayoutBuilder, ParamVector, RngStream, SeqNet, Tensor};
use crate::par;
use crate::train::{
    fit, sample_windows, split_holdout, stack, tiling_windows, Batch, FitOutcome, NormSeq, TrainConfig, Window,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsArch {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub head_hidden: usize,
}

impl DynamicsArch {
    pub fn net(&self) -> SeqNet {
        SeqNet::new(
            "dyn",
            self.state_dim + self.action_dim,
            self.hidden,
            self.head_hidden,
            self.state_dim,
        )
    }

    fn builder(&self) -> LayoutBuilder {
        let mut b = LayoutBuilder::new();
        self.net().declare(&mut b, 0.1);
        b
    }

    pub fn init(&self, rng: &mut RngStream) -> ParamVector {
        self.builder().build(rng)
    }

    pub fn zeros(&self) -> ParamVector {
        self.builder().zeros()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub dataset_seed: u64,
    pub train_seed: u64,
    pub n_trajectories: usize,
    pub epochs: usize,
    /// Last-epoch mean training loss per trained network.
    pub final_losses: Vec<f64>,
    /// Mean training loss per epoch, averaged over trained networks.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
    /// Mean held-out loss per epoch, averaged over trained networks.
    #[serde(default)]
    pub val_curve: Vec<f64>,
    /// Epoch whose parameters were kept, per trained network.
    #[serde(default)]
    pub best_epochs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl TrainMeta {
    pub(crate) fn from_fits(data: &TrajectoryDataset, seed: u64, epochs: usize, fits: &[&FitOutcome]) -> Self {
        let mut loss_curve = vec![0.0; epochs];
        for o in fits {
            loss_curve
                .iter_mut()
                .zip(&o.losses)
                .for_each(|(a, b)| *a += b / fits.len() as f64);
        }
        let mut val_curve = vec![0.0; fits.first().map_or(0, |o| o.val_losses.len())];
        for o in fits {
            val_curve
                .iter_mut()
                .zip(&o.val_losses)
                .for_each(|(a, b)| *a += b / fits.len() as f64);
        }
        Self {
            dataset_seed: data.generation_seed,
            train_seed: seed,
            n_trajectories: data.len(),
            epochs,
            val_curve,
            final_losses: fits.iter().map(|o| *o.losses.last().unwrap_or(&f64::NAN)).collect(),
            loss_curve,
            best_epochs: fits.iter().map(|o| o.best_epoch).collect(),
            config_hash: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsEnsemble {
    pub members: Vec<ParamVector>,
    pub arch: DynamicsArch,
    pub normalization: Normalization,
    pub train_meta: TrainMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberForecast {
    pub member_index: usize,
    /// `ŝ_1 .. ŝ_T`.
    pub states: Vec<Vec<f64>>,
}

/// Batched closed-loop stepping of one member; row `i` of every call
/// belongs to the same rollout.
pub struct MemberStepper<'a> {
    norm: &'a Normalization,
    net: BoundSeqNet<Tensor>,
    h: Tensor,
}

impl<'a> MemberStepper<'a> {
    pub fn new(ens: &'a DynamicsEnsemble, member: usize, rows: usize) -> Result<Self> {
        let p = ens.member(member)?;
        let net = ens.arch.net().bind(&mut Eval, 0, p)?;
        Ok(Self {
            norm: &ens.normalization,
            net,
            h: Tensor::zeros(rows, ens.arch.hidden),
        })
    }

    /// Advances every row by one step. Returns the next raw states and the
    /// normalized deltas the member predicted.
    pub fn step(&mut self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let x: Vec<Vec<f64>> = states
            .iter()
            .zip(actions)
            .map(|(s, a)| {
                let mut v = self.norm.norm_state(s);
                v.extend(self.norm.norm_action(a));
                v
            })
            .collect();
        let x = stack(x.iter().map(Vec::as_slice));
        let (y, h) = self.net.step(&mut Eval, &x, &self.h);
        self.h = h;
        let mut next = Vec::with_capacity(states.len());
        let mut deltas = Vec::with_capacity(states.len());
        for (r, s) in states.iter().enumerate() {
            let d = y.row_slice(r).to_vec();
            let raw = self.norm.denorm_delta(&d);
            next.push(s.iter().zip(&raw).map(|(a, b)| a + b).collect());
            deltas.push(d);
        }
        (next, deltas)
    }
}

/// Closed-loop rollouts of one member from many start states under fixed
/// action sequences. Returns `(states s_0..T, normalized deltas)` per row.
pub(crate) fn rollout_many(
    ens: &DynamicsEnsemble,
    member: usize,
    s0: &[Vec<f64>],
    actions: &[&[Vec<f64>]],
) -> Result<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
    let rows = s0.len();
    let horizon = actions.first().map_or(0, |a| a.len());
    let mut stepper = MemberStepper::new(ens, member, rows)?;
    let mut out: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = s0
        .iter()
        .map(|s| (vec![s.clone()], Vec::with_capacity(horizon)))
        .collect();
    let mut cur = s0.to_vec();
    for t in 0..horizon {
        let a: Vec<Vec<f64>> = actions.iter().map(|seq| seq[t].clone()).collect();
        let (next, deltas) = stepper.step(&cur, &a);
        for (o, (n, d)) in out.iter_mut().zip(next.iter().zip(deltas)) {
            o.0.push(n.clone());
            o.1.push(d);
        }
        cur = next;
    }
    Ok(out)
}

impl DynamicsEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, m: usize) -> Result<&ParamVector> {
        self.members
            .get(m)
            .ok_or_else(|| Error::OutOfRange(format!("member {m} of {}", self.members.len())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(Error::config(format!(
                "ensemble needs M >= 2 members, has {}",
                self.members.len()
            )));
        }
        let layout = self.arch.zeros();
        for p in &self.members {
            if p.layout() != layout.layout() {
                return Err(Error::dim("ensemble members disagree in architecture"));
            }
            p.check_finite()?;
        }
        self.normalization.validate()
    }

    /// One-step mean squared error in raw state units, teacher-forced along
    /// every trajectory of `data`.
    pub fn one_step_mse(&self, member: usize, data: &TrajectoryDataset) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut stepper = MemberStepper::new(self, member, data.len())?;
        for t in 0..data.horizon() {
            let s: Vec<Vec<f64>> = data.trajectories.iter().map(|tr| tr.states[t].clone()).collect();
            let a: Vec<Vec<f64>> = data.trajectories.iter().map(|tr| tr.actions[t].clone()).collect();
            let (next, _) = stepper.step(&s, &a);
            for (tr, n) in data.trajectories.iter().zip(&next) {
                for (x, y) in tr.states[t + 1].iter().zip(n) {
                    sum += (x - y) * (x - y);
                    count += 1;
                }
            }
        }
        Ok(sum / count.max(1) as f64)
    }
}

/// Closed-loop rollout `ŝ_{t+1} = ŝ_t + Δ̂(ŝ_t, a_t, h_t)` of one member.
pub fn rollout(ens: &DynamicsEnsemble, member: usize, s0: &[f64], actions: &[Vec<f64>]) -> Result<MemberForecast> {
    ens.member(member)?;
    let ds = ens.arch.state_dim;
    if s0.len() != ds || actions.iter().any(|a| a.len() != ens.arch.action_dim) {
        return Err(Error::dim("rollout input does not match the ensemble's dimensions"));
    }
    let mut r = rollout_many(ens, member, &[s0.to_vec()], &[actions])?;
    let (mut states, _) = r.remove(0);
    states.remove(0);
    if states.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            segment: format!("member {member} rollout"),
        });
    }
    Ok(MemberForecast {
        member_index: member,
        states,
    })
}

fn check_forecasts(forecasts: &[MemberForecast]) -> Result<(usize, usize)> {
    let first = forecasts
        .first()
        .ok_or_else(|| Error::InsufficientSamples("no member forecasts".into()))?;
    let t = first.states.len();
    let d = first.states.first().map_or(0, Vec::len);
    if forecasts
        .iter()
        .any(|f| f.states.len() != t || f.states.iter().any(|s| s.len() != d))
    {
        return Err(Error::dim("member forecasts disagree in shape"));
    }
    Ok((t, d))
}

/// Elementwise mean across member forecasts.
pub fn ensemble_mean(forecasts: &[MemberForecast]) -> Result<Vec<Vec<f64>>> {
    let (t, d) = check_forecasts(forecasts)?;
    let m = forecasts.len() as f64;
    let mut mean = vec![vec![0.0; d]; t];
    for f in forecasts {
        for (row, s) in mean.iter_mut().zip(&f.states) {
            row.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
    }
    mean.iter_mut().flatten().for_each(|v| *v /= m);
    Ok(mean)
}

/// `ŷ_m − mean`.
pub fn epistemic_residual(forecast: &MemberForecast, mean: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    crate::residual::difference(&forecast.states, mean)
}

struct WindowBatch {
    windows: Vec<Window>,
}

impl Batch for WindowBatch {
    fn len(&self) -> usize {
        self.windows.len()
    }
}

/// Teacher-forced squared error of normalized deltas, summed over the
/// batch rows in `rows` and averaged over window steps and dimensions.
fn window_loss<B: Backend>(
    be: &mut B,
    arch: &DynamicsArch,
    p: &ParamVector,
    seqs: &[NormSeq],
    windows: &[Window],
    len: usize,
) -> Result<B::V> {
    let net = arch.net().bind(be, 0, p)?;
    let mut h = be.constant(Tensor::zeros(windows.len(), arch.hidden));
    let mut terms = Vec::with_capacity(len);
    for k in 0..len {
        let x: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| {
                let s = &seqs[w.traj];
                let mut v = s.states[w.start + k].clone();
                v.extend_from_slice(&s.actions[w.start + k]);
                v
            })
            .collect();
        let y = stack(windows.iter().map(|w| seqs[w.traj].deltas[w.start + k].as_slice()));
        let x = be.constant(stack(x.iter().map(Vec::as_slice)));
        let y = be.constant(y);
        let (pred, h2) = net.step(be, &x, &h);
        h = h2;
        let err = be.sub(&pred, &y);
        terms.push(be.sum_squares(&err));
    }
    let total = sum_all(be, &terms);
    Ok(be.scale(&total, 1.0 / (len * arch.state_dim) as f64))
}

pub(crate) fn sum_all<B: Backend>(be: &mut B, terms: &[B::V]) -> B::V {
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = be.add(&total, t);
    }
    total
}

/// Trains `m` members independently. Member `i` draws its initialisation and
/// batch order from its own fork of the seed.
pub fn train_ensemble(
    data: &TrajectoryDataset,
    m: usize,
    arch: &DynamicsArch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<DynamicsEnsemble> {
    if m < 2 {
        return Err(Error::config(format!("ensemble size M must be >= 2 (got {m})")));
    }
    cfg.validate("ensemble")?;
    if data.is_empty() {
        return Err(Error::InsufficientSamples("empty training dataset".into()));
    }
    if arch.state_dim != data.state_dim() || arch.action_dim != data.action_dim() {
        return Err(Error::dim("ensemble architecture does not match the dataset"));
    }
    let seqs: Vec<NormSeq> = data
        .trajectories
        .iter()
        .map(|t| NormSeq::new(t, &data.normalization))
        .collect();
    let horizon = data.horizon();
    let len = cfg.window_len(horizon);
    let root = RngStream::labeled(seed, "ensemble");
    let trained = par::try_map_range(m, |i| {
        let member_rng = root.fork(i as u64);
        let (train_idx, held) = split_holdout(seqs.len(), cfg.holdout, &mut member_rng.fork_labeled("holdout"));
        let val_windows = tiling_windows(&held, horizon, len);
        let val =
            |p: &[ParamVector]| window_loss(&mut Eval, arch, &p[0], &seqs, &val_windows, len).map(|v| v.get(0, 0));
        let mut params = vec![arch.init(&mut member_rng.fork_labeled("init"))];
        let mut batch_rng = member_rng.fork_labeled("batches");
        let out = fit(
            &format!("ensemble member {i}"),
            &mut params,
            cfg,
            &mut batch_rng,
            |_, rng| {
                Ok(WindowBatch {
                    windows: sample_windows(rng, &train_idx, horizon, len, cfg.batch_size),
                })
            },
            |p, batch, rows, _| {
                let ws = &batch.windows[rows];
                value_and_grad(&[&p[0]], |gr: &mut Graph| window_loss(gr, arch, &p[0], &seqs, ws, len))
            },
            (!val_windows.is_empty()).then_some(&val as &_),
        )?;
        Ok::<_, Error>((params.remove(0), out))
    })?;
    let fits: Vec<&FitOutcome> = trained.iter().map(|(_, o)| o).collect();
    let train_meta = TrainMeta::from_fits(data, seed, cfg.epochs, &fits);
    let members = trained.into_iter().map(|(p, _)| p).collect();
    Ok(DynamicsEnsemble {
        members,
        arch: arch.clone(),
        normalization: data.normalization.clone(),
        train_meta,
    })
}
