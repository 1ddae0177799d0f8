//! `pusher-lite`: a 2-D point tip pushes a ball across a plane.
//!
//! State (8): tip position, tip velocity, ball position, ball velocity.
//! Action (2): force on the tip, saturated at `MAX_FORCE` before noise.

use super::{EnvConfig, Scenario, Trajectory};
use crate::numeric::RngStream;

pub const STATE_DIM: usize = 8;
pub const ACTION_DIM: usize = 2;

pub const MAX_FORCE: f64 = 4.0;
/// 5% of the action scale.
pub const DEFAULT_NOISE_STD: f64 = 0.05 * MAX_FORCE;
pub const TIP_DAMPING: f64 = 2.0;
pub const BALL_FRICTION: f64 = 1.5;
pub const TIP_MASS: f64 = 1.0;
pub const BALL_MASS: f64 = 1.0;
pub const CONTACT_RADIUS: f64 = 0.1;

/// Explicit Euler step. Returns the next state and whether contact occurred.
///
/// Contact is perfectly inelastic along the tip-ball normal: when the pair is
/// closer than `CONTACT_RADIUS` and approaching, the impulse that zeroes
/// their normal relative velocity is applied.
pub(super) fn step(s: &[f64], a: &[f64], rng: &mut RngStream, cfg: &EnvConfig) -> (Vec<f64>, bool) {
    let dt = cfg.dt;
    let mut u = [a[0], a[1]];
    let norm = (u[0] * u[0] + u[1] * u[1]).sqrt();
    if norm > MAX_FORCE {
        u[0] *= MAX_FORCE / norm;
        u[1] *= MAX_FORCE / norm;
    }
    if cfg.action_noise_std > 0.0 {
        u[0] += cfg.action_noise_std * rng.normal();
        u[1] += cfg.action_noise_std * rng.normal();
    }

    let (tp, tv, bp, bv) = ([s[0], s[1]], [s[2], s[3]], [s[4], s[5]], [s[6], s[7]]);
    let mut ntp = [tp[0] + dt * tv[0], tp[1] + dt * tv[1]];
    let mut ntv = [
        tv[0] + dt * (u[0] / TIP_MASS - TIP_DAMPING * tv[0]),
        tv[1] + dt * (u[1] / TIP_MASS - TIP_DAMPING * tv[1]),
    ];
    let nbp = [bp[0] + dt * bv[0], bp[1] + dt * bv[1]];
    let mut nbv = [bv[0] * (1.0 - BALL_FRICTION * dt), bv[1] * (1.0 - BALL_FRICTION * dt)];

    let d = [nbp[0] - ntp[0], nbp[1] - ntp[1]];
    let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let mut contact = false;
    if dist < CONTACT_RADIUS && dist > 1e-12 {
        let n = [d[0] / dist, d[1] / dist];
        let closing = (ntv[0] - nbv[0]) * n[0] + (ntv[1] - nbv[1]) * n[1];
        if closing > 0.0 {
            contact = true;
            let j = closing * TIP_MASS * BALL_MASS / (TIP_MASS + BALL_MASS);
            for k in 0..2 {
                ntv[k] -= j / TIP_MASS * n[k];
                nbv[k] += j / BALL_MASS * n[k];
            }
            // keep the tip on the contact circle
            let push = CONTACT_RADIUS - dist;
            ntp[0] -= push * n[0];
            ntp[1] -= push * n[1];
        }
    }
    (
        vec![ntp[0], ntp[1], ntv[0], ntv[1], nbp[0], nbp[1], nbv[0], nbv[1]],
        contact,
    )
}

pub(super) fn sample_scenario(rng: &mut RngStream) -> Scenario {
    let ball = [rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)];
    let tip = loop {
        let t = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
        if ((t[0] - ball[0]).powi(2) + (t[1] - ball[1]).powi(2)).sqrt() > 0.3 {
            break t;
        }
    };
    let ang = rng.uniform(0.0, std::f64::consts::TAU);
    let reach = rng.uniform(0.3, 0.8);
    let goal = vec![ball[0] + reach * ang.cos(), ball[1] + reach * ang.sin()];
    Scenario {
        s0: vec![tip[0], tip[1], 0.0, 0.0, ball[0], ball[1], 0.0, 0.0],
        goal,
    }
}

/// Whether any step of the trajectory involved tip-ball contact, detected
/// from changes in the ball velocity beyond friction decay.
pub fn pusher_contact(traj: &Trajectory, cfg: &EnvConfig) -> bool {
    let decay = 1.0 - BALL_FRICTION * cfg.dt;
    traj.states.windows(2).any(|w| {
        let (a, b) = (&w[0], &w[1]);
        (b[6] - a[6] * decay).abs() > 1e-12 || (b[7] - a[7] * decay).abs() > 1e-12
    })
}

/// A tip aimed at the edge of the ball so action noise decides between a
/// glancing hit and a miss. Returns `(s0, constant action)`.
pub fn pusher_bifurcation_fixture() -> (Vec<f64>, Vec<f64>) {
    // the tip starts 0.8 left of the ball, offset sideways by the contact
    // radius, and is driven straight right
    let s0 = vec![-0.8, CONTACT_RADIUS, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    (s0, vec![2.0, 0.0])
}

#[cfg(test)]
mod tests {
    use super::super::{step as env_step, EnvConfig, EnvId, Trajectory};
    use super::*;

    #[test]
    fn free_tip_matches_closed_form_euler() {
        // constant force, no noise, ball far away: the tip velocity follows
        // v_k = v* + (v0 - v*) q^k with q = 1 - c dt, v* = u / c, and the
        // position sums the previous velocities
        let mut cfg = EnvConfig::pusher_lite();
        cfg.action_noise_std = 0.0;
        let mut rng = RngStream::new(0, 0);
        let u = [1.5, -0.5];
        let v0 = [0.2, 0.1];
        let p0 = [-1.0, 1.0];
        let mut s = vec![p0[0], p0[1], v0[0], v0[1], 5.0, 5.0, 0.0, 0.0];
        let steps = 25;
        for _ in 0..steps {
            s = env_step(&s, &u, 0.0, &mut rng, &cfg).unwrap();
        }
        let q: f64 = 1.0 - TIP_DAMPING * cfg.dt;
        for k in 0..2 {
            let vstar = u[k] / TIP_DAMPING;
            let v_n = vstar + (v0[k] - vstar) * q.powi(steps);
            // Σ_{j<n} v_j = n v* + (v0 - v*) (1 - q^n) / (1 - q)
            let sum_v = steps as f64 * vstar + (v0[k] - vstar) * (1.0 - q.powi(steps)) / (1.0 - q);
            let p_n = p0[k] + cfg.dt * sum_v;
            assert!((s[2 + k] - v_n).abs() < 1e-12, "velocity {k}");
            assert!((s[k] - p_n).abs() < 1e-12, "position {k}");
        }
        assert_eq!(&s[4..], &[5.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn deterministic_given_rng_state() {
        let cfg = EnvConfig::pusher_lite();
        let s = vec![0.0, 0.0, 0.1, 0.0, 0.05, 0.0, 0.0, 0.0];
        let a = [1.0, 0.0];
        let x = env_step(&s, &a, 0.0, &mut RngStream::new(3, 9), &cfg).unwrap();
        let y = env_step(&s, &a, 0.0, &mut RngStream::new(3, 9), &cfg).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn head_on_contact_moves_the_ball() {
        let mut cfg = EnvConfig::pusher_lite();
        cfg.action_noise_std = 0.0;
        let mut rng = RngStream::new(0, 0);
        let s = vec![-0.12, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (n, contact) = step(&s, &[0.0, 0.0], &mut rng, &cfg);
        assert!(contact);
        assert!(n[6] > 0.0 && n[7].abs() < 1e-15);
        // momentum along the normal is conserved by the impulse
        let tv = 1.0 * (1.0 - TIP_DAMPING * cfg.dt);
        assert!((n[2] * TIP_MASS + n[6] * BALL_MASS - tv * TIP_MASS).abs() < 1e-12);
    }

    #[test]
    fn bifurcation_fixture_splits_outcomes() {
        let cfg = EnvConfig::pusher_lite();
        let (s0, a) = pusher_bifurcation_fixture();
        let root = RngStream::new(2024, 0);
        let runs = 1000;
        let mut hits = 0;
        for i in 0..runs {
            let mut rng = root.fork(i);
            let mut states = vec![s0.clone()];
            let mut actions = Vec::new();
            for _ in 0..40 {
                let next = env_step(states.last().unwrap(), &a, 0.0, &mut rng, &cfg).unwrap();
                states.push(next);
                actions.push(a.clone());
            }
            let tr = Trajectory::new(states, actions).unwrap();
            if pusher_contact(&tr, &cfg) {
                hits += 1;
            }
        }
        let frac = hits as f64 / runs as f64;
        assert!((0.05..=0.95).contains(&frac), "contact fraction {frac}");
        assert_eq!(EnvId::PusherLite.state_dim(), 8);
    }
}
