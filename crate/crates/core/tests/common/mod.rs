#![allow(dead_code)]

pub mod gradcheck;
pub mod known_noise;
pub mod oracles;
