//! Scripted policies. Each maps the current state and a goal to an action,
//! plus Gaussian exploration dither drawn from the caller's stream.

use serde::{Deserialize, Serialize};

use super::{pusher, EnvConfig, EnvId};
use crate::error::{Error, Result};
use crate::numeric::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Proportional controller: move behind the ball, then push it toward
    /// the goal.
    PusherPush,
    /// Velocity controller toward a waypoint.
    DroneWaypoint,
    /// `a = 0.5 (goal − s)`.
    LinearGoal,
}

impl PolicyKind {
    pub fn default_for(env: EnvId) -> Self {
        match env {
            EnvId::PusherLite => PolicyKind::PusherPush,
            EnvId::DroneLite => PolicyKind::DroneWaypoint,
            EnvId::LinearToy => PolicyKind::LinearGoal,
        }
    }

    pub fn env(self) -> EnvId {
        match self {
            PolicyKind::PusherPush => EnvId::PusherLite,
            PolicyKind::DroneWaypoint => EnvId::DroneLite,
            PolicyKind::LinearGoal => EnvId::LinearToy,
        }
    }

    pub fn default_dither(self) -> f64 {
        match self {
            PolicyKind::PusherPush => 0.3,
            PolicyKind::DroneWaypoint => 0.2,
            PolicyKind::LinearGoal => 1.0,
        }
    }
}

/// Which scripted policy drives data collection and evaluation, and how
/// much exploration noise it adds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub dither: f64,
}

impl From<PolicyKind> for PolicyConfig {
    fn from(kind: PolicyKind) -> Self {
        Self {
            kind,
            dither: kind.default_dither(),
        }
    }
}

impl PolicyConfig {
    pub fn for_goal(&self, goal: Vec<f64>) -> Policy {
        Policy {
            kind: self.kind,
            goal,
            dither: self.dither,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub goal: Vec<f64>,
    pub dither: f64,
}

const PUSH_KP: f64 = 8.0;
const PUSH_KD: f64 = 3.0;
const DRONE_KP: f64 = 1.0;
const DRONE_KV: f64 = 2.0;
const DRONE_VMAX: f64 = 1.5;

impl Policy {
    pub fn new(kind: PolicyKind, goal: Vec<f64>, dither: f64) -> Result<Self> {
        let want = kind.env().task_dims().len();
        if goal.len() != want {
            return Err(Error::dim(format!(
                "{kind:?} goal needs {want} entries, got {}",
                goal.len()
            )));
        }
        if !(dither >= 0.0) {
            return Err(Error::config(format!("policy dither must be >= 0 (got {dither})")));
        }
        Ok(Self { kind, goal, dither })
    }

    /// The environment's default policy with its default dither.
    pub fn default_for(cfg: &EnvConfig, goal: Vec<f64>) -> Self {
        let kind = PolicyKind::default_for(cfg.env_id);
        Self {
            kind,
            goal,
            dither: kind.default_dither(),
        }
    }

    pub fn with_dither(mut self, dither: f64) -> Self {
        self.dither = dither;
        self
    }

    /// Noise-free part of the action.
    pub fn command(&self, s: &[f64]) -> Vec<f64> {
        match self.kind {
            PolicyKind::PusherPush => self.pusher_command(s),
            PolicyKind::DroneWaypoint => {
                let mut v_des = [0.0; 3];
                for k in 0..3 {
                    v_des[k] = DRONE_KP * (self.goal[k] - s[k]);
                }
                let n = v_des.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > DRONE_VMAX {
                    v_des.iter_mut().for_each(|x| *x *= DRONE_VMAX / n);
                }
                (0..3).map(|k| DRONE_KV * (v_des[k] - s[3 + k])).collect()
            }
            PolicyKind::LinearGoal => s.iter().zip(&self.goal).map(|(x, g)| 0.5 * (g - x)).collect(),
        }
    }

    fn pusher_command(&self, s: &[f64]) -> Vec<f64> {
        let tip = [s[0], s[1]];
        let ball = [s[4], s[5]];
        let to_goal = [self.goal[0] - ball[0], self.goal[1] - ball[1]];
        let dist = (to_goal[0].powi(2) + to_goal[1].powi(2)).sqrt().max(1e-9);
        let dir = [to_goal[0] / dist, to_goal[1] / dist];
        let rel = [tip[0] - ball[0], tip[1] - ball[1]];
        let along = rel[0] * dir[0] + rel[1] * dir[1];
        let lateral = (rel[0] * dir[1] - rel[1] * dir[0]).abs();
        let standoff = pusher::CONTACT_RADIUS + 0.05;
        let aim = if along < -0.5 * pusher::CONTACT_RADIUS && lateral < 0.06 {
            // lined up behind the ball: drive through it
            [ball[0] + 0.2 * dir[0], ball[1] + 0.2 * dir[1]]
        } else {
            [ball[0] - standoff * dir[0], ball[1] - standoff * dir[1]]
        };
        vec![
            PUSH_KP * (aim[0] - tip[0]) - PUSH_KD * s[2],
            PUSH_KP * (aim[1] - tip[1]) - PUSH_KD * s[3],
        ]
    }

    /// Command plus dither. Consumes one normal per action entry when dither
    /// is positive.
    pub fn act(&self, s: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let mut a = self.command(s);
        if self.dither > 0.0 {
            a.iter_mut().for_each(|x| *x += self.dither * rng.normal());
        }
        a
    }
}
