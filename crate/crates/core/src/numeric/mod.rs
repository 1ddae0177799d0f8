//! Differentiable-computation substrate: arrays, layers, gradients, optimizer
//! and random streams.

pub mod adam;
pub mod autodiff;
pub mod gaussian;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use autodiff::{grad, value_and_grad, Backend, Eval, Graph, Var};
pub use gaussian::{
    kl_to_standard_normal, kl_to_standard_normal_v, reparameterize, reparameterize_v, GaussianHead, LOGVAR_MAX,
    LOGVAR_MIN,
};
pub use nn::{GruCell, Linear, Mlp, SeqNet};
pub use params::{Init, Layout, LayoutBuilder, ParamVector, Segment};
pub use rng::RngStream;
pub use tensor::Tensor;
