//! Episode rollout, dataset generation, normalization statistics and the
//! line-delimited dataset file format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sample_scenario, step, EnvConfig, EnvId, Policy, PolicyConfig, Trajectory};
use crate::error::{Error, Result};
use crate::numeric::RngStream;
use crate::par;

/// Runs `policy` for `cfg.horizon` steps from `s0`.
///
/// Dither and environment noise draw from separate forks of `rng`, so two
/// rollouts that differ only in `hidden` see identical noise.
pub fn rollout(cfg: &EnvConfig, policy: &Policy, s0: &[f64], hidden: f64, rng: &mut RngStream) -> Result<Trajectory> {
    let mut policy_rng = rng.fork_labeled("policy");
    let mut env_rng = rng.fork_labeled("env");
    let mut states = Vec::with_capacity(cfg.horizon + 1);
    let mut actions = Vec::with_capacity(cfg.horizon);
    states.push(s0.to_vec());
    for t in 0..cfg.horizon {
        let a = policy.act(&states[t], &mut policy_rng);
        let next = step(&states[t], &a, hidden, &mut env_rng, cfg)?;
        actions.push(a);
        states.push(next);
    }
    Ok(Trajectory {
        states,
        actions,
        hidden_param: hidden,
    })
}

/// Applies a fixed action sequence from `s0`.
pub fn rollout_actions(
    cfg: &EnvConfig,
    s0: &[f64],
    actions: &[Vec<f64>],
    hidden: f64,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let mut env_rng = rng.fork_labeled("env");
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(s0.to_vec());
    for (t, a) in actions.iter().enumerate() {
        let next = step(&states[t], a, hidden, &mut env_rng, cfg)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        actions: actions.to_vec(),
        hidden_param: hidden,
    })
}

/// Per-dimension mean and scale of states and actions, plus the scale of
/// one-step state deltas.
///
/// Deltas are scaled but not centred, so a zero normalized delta means no
/// motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub state_mean: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_scale: Vec<f64>,
    pub delta_scale: Vec<f64>,
}

fn floor_scale(s: f64) -> f64 {
    if s > 1e-8 {
        s
    } else {
        1.0
    }
}

fn moments<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
        n += 1;
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    let n = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        var.iter_mut()
            .zip(r.iter().zip(&mean))
            .for_each(|(v, (x, m))| *v += (x - m) * (x - m));
    }
    let scale = var.iter().map(|v| floor_scale((v / n).sqrt())).collect();
    (mean, scale)
}

impl Normalization {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Self {
        let ds = trajs.first().map_or(0, Trajectory::state_dim);
        let da = trajs.first().map_or(0, Trajectory::action_dim);
        let states = trajs.iter().flat_map(|t| t.states.iter().map(Vec::as_slice));
        let actions = trajs.iter().flat_map(|t| t.actions.iter().map(Vec::as_slice));
        let mut sq = vec![0.0; ds];
        let mut count = 0usize;
        for t in trajs {
            for w in t.states.windows(2) {
                count += 1;
                for (k, acc) in sq.iter_mut().enumerate() {
                    *acc += (w[1][k] - w[0][k]).powi(2);
                }
            }
        }
        let delta_scale = sq
            .iter()
            .map(|v| floor_scale((v / count.max(1) as f64).sqrt()))
            .collect();
        let (state_mean, state_scale) = moments(states, ds);
        let (action_mean, action_scale) = moments(actions, da);
        Self {
            state_mean,
            state_scale,
            action_mean,
            action_scale,
            delta_scale,
        }
    }

    /// Identity transform, for fixtures.
    pub fn identity(ds: usize, da: usize) -> Self {
        Self {
            state_mean: vec![0.0; ds],
            state_scale: vec![1.0; ds],
            action_mean: vec![0.0; da],
            action_scale: vec![1.0; da],
            delta_scale: vec![1.0; ds],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.state_dim();
        let da = self.action_dim();
        if self.state_scale.len() != ds || self.delta_scale.len() != ds || self.action_scale.len() != da {
            return Err(Error::dim("normalization vectors disagree in length"));
        }
        let scales = self
            .state_scale
            .iter()
            .chain(&self.action_scale)
            .chain(&self.delta_scale);
        if scales.clone().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::config("normalization scale must be strictly positive"));
        }
        Ok(())
    }

    pub fn norm_state(&self, s: &[f64]) -> Vec<f64> {
        affine_in(s, &self.state_mean, &self.state_scale)
    }

    pub fn denorm_state(&self, z: &[f64]) -> Vec<f64> {
        affine_out(z, &self.state_mean, &self.state_scale)
    }

    pub fn norm_action(&self, a: &[f64]) -> Vec<f64> {
        affine_in(a, &self.action_mean, &self.action_scale)
    }

    pub fn norm_delta(&self, d: &[f64]) -> Vec<f64> {
        d.iter().zip(&self.delta_scale).map(|(d, s)| d / s).collect()
    }

    pub fn denorm_delta(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.delta_scale).map(|(z, s)| z * s).collect()
    }
}

fn affine_in(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(scale).map(|((x, m), s)| (x - m) / s).collect()
}

fn affine_out(z: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    z.iter().zip(mean).zip(scale).map(|((z, m), s)| z * s + m).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub env_id: EnvId,
    pub trajectories: Vec<Trajectory>,
    pub normalization: Normalization,
    pub generation_seed: u64,
    /// Hash of the experiment config that produced the file, if any.
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    env_id: EnvId,
    #[serde(rename = "D_s")]
    d_s: usize,
    #[serde(rename = "D_a")]
    d_a: usize,
    horizon: usize,
    seed: u64,
    normalization: Normalization,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl TrajectoryDataset {
    /// Builds a dataset, checking shared shapes and computing normalization.
    pub fn new(env_id: EnvId, trajectories: Vec<Trajectory>, generation_seed: u64) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::InsufficientSamples("dataset has no trajectories".into()))?;
        let (ds, da, h) = (first.state_dim(), first.action_dim(), first.horizon());
        if ds != env_id.state_dim() || da != env_id.action_dim() {
            return Err(Error::dim(format!(
                "{env_id} expects D_s={}, D_a={}",
                env_id.state_dim(),
                env_id.action_dim()
            )));
        }
        for t in &trajectories {
            t.validate()?;
            if t.state_dim() != ds || t.action_dim() != da || t.horizon() != h {
                return Err(Error::dim("trajectories disagree in shape"));
            }
        }
        let normalization = Normalization::from_trajectories(&trajectories);
        Ok(Self {
            env_id,
            trajectories,
            normalization,
            generation_seed,
            config_hash: None,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].horizon()
    }

    pub fn state_dim(&self) -> usize {
        self.env_id.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.env_id.action_dim()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = Header {
            env_id: self.env_id,
            d_s: self.state_dim(),
            d_a: self.action_dim(),
            horizon: self.horizon(),
            seed: self.generation_seed,
            normalization: self.normalization.clone(),
            n: self.len(),
            config_hash: self.config_hash.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        let mut lines = BufReader::new(file).lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty dataset file", path.display())))??;
        let header: Header = serde_json::from_str(&head)?;
        let mut trajectories = Vec::with_capacity(header.n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line)?;
            t.validate()?;
            trajectories.push(t);
        }
        if trajectories.len() != header.n {
            return Err(Error::Integrity(format!(
                "{}: header announces {} trajectories, found {}",
                path.display(),
                header.n,
                trajectories.len()
            )));
        }
        let mut ds = Self::new(header.env_id, trajectories, header.seed)?;
        if ds.horizon() != header.horizon || ds.state_dim() != header.d_s || ds.action_dim() != header.d_a {
            return Err(Error::Integrity("dataset header disagrees with its records".into()));
        }
        ds.normalization = header.normalization;
        ds.normalization.validate()?;
        ds.config_hash = header.config_hash;
        Ok(ds)
    }
}

/// Rolls out `n` episodes of the scripted policy, one RNG stream per episode.
///
/// Episode `i` draws its scenario, hidden parameter and noise from stream
/// `i` of `seed`, so the first `k` episodes of a larger dataset equal a
/// dataset of size `k` with the same seed.
pub fn generate_dataset(
    cfg: &EnvConfig,
    policy: impl Into<PolicyConfig>,
    n: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let policy: PolicyConfig = policy.into();
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("dataset size n must be >= 1"));
    }
    if policy.kind.env() != cfg.env_id {
        return Err(Error::config(format!(
            "policy {:?} does not drive {}",
            policy.kind, cfg.env_id
        )));
    }
    if !(policy.dither >= 0.0) {
        return Err(Error::config(format!(
            "policy dither must be >= 0 (got {})",
            policy.dither
        )));
    }
    let trajectories = par::try_map_range(n, |i| {
        let mut rng = RngStream::new(seed, i as u64);
        let scenario = sample_scenario(cfg, &mut rng);
        let hidden = cfg.sample_hidden(&mut rng);
        rollout(cfg, &policy.for_goal(scenario.goal), &scenario.s0, hidden, &mut rng)
    })?;
    TrajectoryDataset::new(cfg.env_id, trajectories, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PolicyKind;

    #[test]
    fn shape_and_determinism() {
        let cfg = EnvConfig::pusher_lite();
        let a = generate_dataset(&cfg, PolicyKind::PusherPush, 10, 7).unwrap();
        assert_eq!(a.len(), 10);
        for t in &a.trajectories {
            assert_eq!(t.states.len(), 121);
            assert_eq!(t.actions.len(), 120);
        }
        let b = generate_dataset(&cfg, PolicyKind::PusherPush, 10, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&cfg, PolicyKind::PusherPush, 10, 8).unwrap();
        assert_ne!(a.trajectories, c.trajectories);
    }

    #[test]
    fn normalized_states_are_standardized() {
        let cfg = EnvConfig::drone_lite();
        let d = generate_dataset(&cfg, PolicyKind::DroneWaypoint, 12, 3).unwrap();
        let norm = &d.normalization;
        let z: Vec<Vec<f64>> = d
            .trajectories
            .iter()
            .flat_map(|t| t.states.iter().map(|s| norm.norm_state(s)))
            .collect();
        let n = z.len() as f64;
        for k in 0..d.state_dim() {
            let mean = z.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = z.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "dim {k} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "dim {k} scale {}", var.sqrt());
        }
    }

    #[test]
    fn noise_free_rollout_depends_only_on_inputs() {
        let mut cfg = EnvConfig::pusher_lite();
        cfg.action_noise_std = 0.0;
        let sc = sample_scenario(&cfg, &mut RngStream::new(1, 2));
        let actions: Vec<Vec<f64>> = (0..cfg.horizon).map(|t| vec![(t as f64 * 0.1).sin(), 1.0]).collect();
        let a = rollout_actions(&cfg, &sc.s0, &actions, 0.0, &mut RngStream::new(1, 1)).unwrap();
        let b = rollout_actions(&cfg, &sc.s0, &actions, 0.0, &mut RngStream::new(99, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = EnvConfig::linear_toy(1.0, 5);
        let mut d = generate_dataset(&cfg, PolicyKind::LinearGoal, 4, 11).unwrap();
        d.config_hash = Some("abc".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        d.write_jsonl(&path).unwrap();
        let back = TrajectoryDataset::read_jsonl(&path).unwrap();
        assert_eq!(back, d);
        let text = std::fs::read_to_string(&path).unwrap();
        let head: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["env_id", "D_s", "D_a", "horizon", "seed", "normalization"] {
            assert!(head.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn mismatched_policy_is_rejected() {
        let cfg = EnvConfig::drone_lite();
        assert!(matches!(
            generate_dataset(&cfg, PolicyKind::PusherPush, 2, 0),
            Err(Error::Config(_))
        ));
    }
}
