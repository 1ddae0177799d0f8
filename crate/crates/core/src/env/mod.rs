//! Stochastic desk-scale environments, scripted policies, dataset generation
//! and outcome labelling.
//!
//! Two mechanisms inject aleatoric uncertainty:
//! * `pusher-lite`: Gaussian noise added to the commanded action, compounding
//!   through a contact model whose hit/miss outcome bifurcates futures.
//! * `drone-lite`: a per-episode payload factor scales the vehicle's
//!   acceleration and is never part of the observed state.
//!
//! `linear-toy` is a small linear system with action noise, used as a
//! known-noise fixture.

mod dataset;
mod drone;
mod linear;
mod policy;
mod pusher;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::RngStream;

pub use dataset::{generate_dataset, rollout, rollout_actions, Normalization, TrajectoryDataset};
pub use policy::{Policy, PolicyConfig, PolicyKind};
pub use pusher::{pusher_bifurcation_fixture, pusher_contact};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    PusherLite,
    DroneLite,
    LinearToy,
}

impl EnvId {
    pub fn state_dim(self) -> usize {
        match self {
            EnvId::PusherLite => pusher::STATE_DIM,
            EnvId::DroneLite => drone::STATE_DIM,
            EnvId::LinearToy => linear::STATE_DIM,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvId::PusherLite => pusher::ACTION_DIM,
            EnvId::DroneLite => drone::ACTION_DIM,
            EnvId::LinearToy => linear::ACTION_DIM,
        }
    }

    /// Indices of the state entries an outcome target refers to.
    pub fn task_dims(self) -> std::ops::Range<usize> {
        match self {
            EnvId::PusherLite => 4..6,
            EnvId::DroneLite => 0..3,
            EnvId::LinearToy => 0..2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::PusherLite => "pusher-lite",
            EnvId::DroneLite => "drone-lite",
            EnvId::LinearToy => "linear-toy",
        }
    }
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pusher-lite" => Ok(EnvId::PusherLite),
            "drone-lite" => Ok(EnvId::DroneLite),
            "linear-toy" => Ok(EnvId::LinearToy),
            other => Err(Error::Parse(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub env_id: EnvId,
    pub action_noise_std: f64,
    /// Interval the per-episode hidden parameter is drawn from.
    pub hidden_param_range: [f64; 2],
    pub dt: f64,
    pub horizon: usize,
}

impl EnvConfig {
    pub fn pusher_lite() -> Self {
        Self {
            env_id: EnvId::PusherLite,
            action_noise_std: pusher::DEFAULT_NOISE_STD,
            hidden_param_range: [0.0, 0.0],
            dt: 0.05,
            horizon: 120,
        }
    }

    pub fn drone_lite() -> Self {
        Self {
            env_id: EnvId::DroneLite,
            action_noise_std: drone::DEFAULT_NOISE_STD,
            hidden_param_range: [0.0, 1.0],
            dt: 0.1,
            horizon: 60,
        }
    }

    pub fn linear_toy(noise_std: f64, horizon: usize) -> Self {
        Self {
            env_id: EnvId::LinearToy,
            action_noise_std: noise_std,
            hidden_param_range: [0.0, 0.0],
            dt: 1.0,
            horizon,
        }
    }

    pub fn for_env(env_id: EnvId) -> Self {
        match env_id {
            EnvId::PusherLite => Self::pusher_lite(),
            EnvId::DroneLite => Self::drone_lite(),
            EnvId::LinearToy => Self::linear_toy(1.0, 30),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.env_id.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.env_id.action_dim()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.dt > 0.0) {
            v.push(format!("env.dt must be > 0 (got {})", self.dt));
        }
        if self.horizon < 1 {
            v.push("env.horizon must be >= 1".into());
        }
        if !(self.action_noise_std >= 0.0) {
            v.push(format!(
                "env.action_noise_std must be >= 0 (got {})",
                self.action_noise_std
            ));
        }
        let [lo, hi] = self.hidden_param_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            v.push(format!("env.hidden_param_range [{lo}, {hi}] is not an interval"));
        }
        if lo <= -1.0 {
            v.push("env.hidden_param_range must stay above -1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn sample_hidden(&self, rng: &mut RngStream) -> f64 {
        let [lo, hi] = self.hidden_param_range;
        if hi > lo {
            rng.uniform(lo, hi)
        } else {
            lo
        }
    }
}

/// One episode: `states[0..=T]` and `actions[0..T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[serde(default)]
    pub hidden_param: f64,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self {
            states,
            actions,
            hidden_param: 0.0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(Error::dim(format!(
                "trajectory has {} states and {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        let ds = self.state_dim();
        let da = self.action_dim();
        if self.states.iter().any(|s| s.len() != ds) || self.actions.iter().any(|a| a.len() != da) {
            return Err(Error::dim("ragged trajectory entries"));
        }
        let finite = self.states.iter().chain(&self.actions).flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric {
                segment: "trajectory".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub target: Vec<f64>,
    pub radius: f64,
    pub deadline: usize,
}

impl OutcomeSpec {
    pub fn new(target: Vec<f64>, radius: f64, deadline: usize) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::config(format!("outcome radius must be > 0 (got {radius})")));
        }
        if deadline == 0 {
            return Err(Error::config("outcome deadline must be > 0"));
        }
        Ok(Self {
            target,
            radius,
            deadline,
        })
    }
}

/// Advances the environment by one step.
///
/// Deterministic given the inputs and the state of `rng`; consumes random
/// numbers only when noise is enabled.
pub fn step(
    env_state: &[f64],
    action: &[f64],
    hidden_param: f64,
    rng: &mut RngStream,
    cfg: &EnvConfig,
) -> Result<Vec<f64>> {
    let (ds, da) = (cfg.state_dim(), cfg.action_dim());
    if env_state.len() != ds || action.len() != da {
        return Err(Error::dim(format!(
            "{}: expected state {ds} / action {da}, got {} / {}",
            cfg.env_id,
            env_state.len(),
            action.len()
        )));
    }
    if env_state.iter().chain(action).any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            segment: "env-state".into(),
        });
    }
    let next = match cfg.env_id {
        EnvId::PusherLite => pusher::step(env_state, action, rng, cfg).0,
        EnvId::DroneLite => drone::step(env_state, action, hidden_param, rng, cfg),
        EnvId::LinearToy => linear::step(env_state, action, rng, cfg),
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            segment: "env-state".into(),
        });
    }
    Ok(next)
}

/// Position the outcome target refers to: ball for pusher-lite, vehicle for
/// drone-lite.
pub fn task_position(env: EnvId, state: &[f64]) -> &[f64] {
    &state[env.task_dims()]
}

/// True iff the task position comes within `radius` of the target at some
/// `t <= deadline` (inclusive).
pub fn label_outcome(env: EnvId, traj: &Trajectory, spec: &OutcomeSpec) -> Result<bool> {
    label_states(env, &traj.states, spec)
}

/// [`label_outcome`] on a bare state sequence `s_0..s_T`.
pub fn label_states(env: EnvId, states: &[Vec<f64>], spec: &OutcomeSpec) -> Result<bool> {
    let horizon = states.len().saturating_sub(1);
    if spec.deadline > horizon {
        return Err(Error::OutOfRange(format!(
            "outcome deadline {} exceeds horizon {horizon}",
            spec.deadline
        )));
    }
    let r2 = spec.radius * spec.radius;
    Ok(states[..=spec.deadline].iter().any(|s| {
        let p = task_position(env, s);
        if p.len() != spec.target.len() {
            return false;
        }
        p.iter().zip(&spec.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2
    }))
}

/// Initial conditions plus the goal the scripted policy pursues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub s0: Vec<f64>,
    pub goal: Vec<f64>,
}

pub fn sample_scenario(cfg: &EnvConfig, rng: &mut RngStream) -> Scenario {
    match cfg.env_id {
        EnvId::PusherLite => pusher::sample_scenario(rng),
        EnvId::DroneLite => drone::sample_scenario(rng),
        EnvId::LinearToy => linear::sample_scenario(rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, x_at: impl Fn(usize) -> f64) -> Trajectory {
        let states = (0..=n).map(|t| vec![x_at(t), 0.0]).collect();
        let actions = (0..n).map(|_| vec![0.0, 0.0]).collect();
        Trajectory::new(states, actions).unwrap()
    }

    #[test]
    fn outcome_immediate_success() {
        let tr = line(5, |_| 1.0);
        let spec = OutcomeSpec::new(vec![1.0, 0.0], 0.1, 3).unwrap();
        assert!(label_outcome(EnvId::LinearToy, &tr, &spec).unwrap());
    }

    #[test]
    fn outcome_unreachable_target() {
        let tr = line(5, |t| t as f64 * 0.1);
        let spec = OutcomeSpec::new(vec![100.0, 0.0], 0.01, 5).unwrap();
        assert!(!label_outcome(EnvId::LinearToy, &tr, &spec).unwrap());
    }

    #[test]
    fn outcome_boundary_is_inclusive() {
        // reaches distance exactly 0.5 from the target at t = deadline = 4
        let tr = line(6, |t| t as f64 * 0.25);
        let spec = OutcomeSpec::new(vec![1.5, 0.0], 0.5, 4).unwrap();
        assert!(label_outcome(EnvId::LinearToy, &tr, &spec).unwrap());
        let early = OutcomeSpec::new(vec![1.5, 0.0], 0.5, 3).unwrap();
        assert!(!label_outcome(EnvId::LinearToy, &tr, &early).unwrap());
    }

    #[test]
    fn outcome_deadline_beyond_horizon() {
        let tr = line(3, |_| 0.0);
        let spec = OutcomeSpec::new(vec![0.0, 0.0], 0.1, 4).unwrap();
        assert!(matches!(
            label_outcome(EnvId::LinearToy, &tr, &spec),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn outcome_spec_invariants() {
        assert!(OutcomeSpec::new(vec![0.0], 0.0, 1).is_err());
        assert!(OutcomeSpec::new(vec![0.0], 1.0, 0).is_err());
    }

    #[test]
    fn trajectory_shape_is_checked() {
        assert!(Trajectory::new(vec![vec![0.0]], vec![vec![0.0]]).is_err());
        assert!(Trajectory::new(vec![vec![0.0], vec![f64::NAN]], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn step_rejects_bad_dimensions() {
        let cfg = EnvConfig::drone_lite();
        let mut rng = RngStream::new(0, 0);
        let err = step(&[0.0; 3], &[0.0; 3], 0.0, &mut rng, &cfg).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        let err = step(&[f64::NAN; 10], &[0.0; 3], 0.0, &mut rng, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn config_validation_collects_all_violations() {
        let mut cfg = EnvConfig::pusher_lite();
        cfg.dt = 0.0;
        cfg.action_noise_std = -1.0;
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
