//! `drone-lite`: a 3-D point-mass vehicle with an unobserved payload.
//!
//! State (10): position, velocity, battery, wind.
//! Action (3): commanded thrust, saturated at `MAX_THRUST` before noise.
//!
//! Acceleration is `(thrust + drag·(wind − v)) / (1 + payload)`; the payload
//! factor is fixed per episode and never appears in the state.

use super::{EnvConfig, Scenario};
use crate::numeric::RngStream;

pub const STATE_DIM: usize = 10;
pub const ACTION_DIM: usize = 3;

pub const MAX_THRUST: f64 = 3.0;
pub const DEFAULT_NOISE_STD: f64 = 0.05 * MAX_THRUST;
pub const DRAG: f64 = 0.5;
pub const WIND_TAU: f64 = 2.0;
pub const WIND_SIGMA: f64 = 0.3;
pub const BATTERY_IDLE: f64 = 0.004;
pub const BATTERY_PER_THRUST2: f64 = 0.001;

pub(super) fn acceleration(v: &[f64], wind: &[f64], thrust: &[f64], payload: f64) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for k in 0..3 {
        acc[k] = (thrust[k] + DRAG * (wind[k] - v[k])) / (1.0 + payload);
    }
    acc
}

pub(super) fn step(s: &[f64], a: &[f64], payload: f64, rng: &mut RngStream, cfg: &EnvConfig) -> Vec<f64> {
    let dt = cfg.dt;
    let mut u = [a[0], a[1], a[2]];
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > MAX_THRUST {
        u.iter_mut().for_each(|x| *x *= MAX_THRUST / norm);
    }
    if cfg.action_noise_std > 0.0 {
        u.iter_mut().for_each(|x| *x += cfg.action_noise_std * rng.normal());
    }
    let p = &s[0..3];
    let v = &s[3..6];
    let battery = s[6];
    let w = &s[7..10];
    let acc = acceleration(v, w, &u, payload);

    let mut next = Vec::with_capacity(STATE_DIM);
    for k in 0..3 {
        next.push(p[k] + dt * v[k]);
    }
    for k in 0..3 {
        next.push(v[k] + dt * acc[k]);
    }
    let draw = BATTERY_IDLE + BATTERY_PER_THRUST2 * u.iter().map(|x| x * x).sum::<f64>();
    next.push(battery - dt * draw);
    // Ornstein-Uhlenbeck wind
    let decay = 1.0 - dt / WIND_TAU;
    let kick = WIND_SIGMA * (2.0 * dt / WIND_TAU).sqrt();
    for k in 0..3 {
        next.push(w[k] * decay + kick * rng.normal());
    }
    next
}

pub(super) fn sample_scenario(rng: &mut RngStream) -> Scenario {
    let p = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.0, 1.0)];
    let battery = rng.uniform(0.8, 1.0);
    let wind = [
        WIND_SIGMA * rng.normal(),
        WIND_SIGMA * rng.normal(),
        WIND_SIGMA * rng.normal(),
    ];
    // goal at 2..4 m in a random horizontal direction, small climb
    let ang = rng.uniform(0.0, std::f64::consts::TAU);
    let dist = rng.uniform(2.0, 4.0);
    let goal = vec![
        p[0] + dist * ang.cos(),
        p[1] + dist * ang.sin(),
        p[2] + rng.uniform(-0.5, 0.5),
    ];
    Scenario {
        s0: vec![p[0], p[1], p[2], 0.0, 0.0, 0.0, battery, wind[0], wind[1], wind[2]],
        goal,
    }
}
