//! Reverse-mode gradients of the deployed networks against central finite
//! differences. Each check returns the max relative error over all
//! parameters.

use trajcast::ensemble::DynamicsArch;
use trajcast::numeric::{
    kl_to_standard_normal_v, reparameterize_v, value_and_grad, Backend, Eval, GruCell, LayoutBuilder, Mlp, ParamVector,
    RngStream, SeqNet, Tensor, LOGVAR_MAX, LOGVAR_MIN,
};
use trajcast::vae::VaeArch;
use trajcast::Result;

pub const SEEDS: [u64; 3] = [11, 12, 13];
const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Relative error with a floor on the denominator, so that gradients at
/// round-off scale are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between the reverse-mode gradient and the central
/// difference, over every parameter.
fn max_rel_error(
    p: &ParamVector,
    graph: impl Fn(&ParamVector) -> Result<(f64, Vec<f64>)>,
    eval: impl Fn(&ParamVector) -> f64,
) -> f64 {
    let (_, g) = graph(p).unwrap();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let mut hi = p.clone();
        hi.values_mut()[i] += STEP;
        let mut lo = p.clone();
        lo.values_mut()[i] -= STEP;
        let fd = (eval(&hi) - eval(&lo)) / (2.0 * STEP);
        worst = worst.max(rel_err(g[i], fd));
    }
    worst
}

fn inputs(rng: &mut RngStream, steps: usize, rows: usize, cols: usize) -> Vec<Tensor> {
    (0..steps)
        .map(|_| Tensor::from_vec(rows, cols, rng.normals(rows * cols)))
        .collect()
}

/// `Σ_t Σ w ⊙ y_t + ½ Σ y_t²` over a short rollout of `net`.
fn seq_objective<B: Backend>(be: &mut B, net: &SeqNet, p: &ParamVector, xs: &[Tensor], w: &Tensor) -> Result<B::V> {
    let bound = net.bind(be, 0, p)?;
    let mut h = be.constant(Tensor::zeros(xs[0].rows(), net.hidden()));
    let mut terms = Vec::new();
    for x in xs {
        let xv = be.constant(x.clone());
        let (y, h2) = bound.step(be, &xv, &h);
        h = h2;
        let lin = be.mul_const(&y, w);
        terms.push(be.sum(&lin));
        let sq = be.sum_squares(&y);
        terms.push(be.scale(&sq, 0.5));
    }
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = be.add(&acc, t);
    }
    Ok(acc)
}

fn check_seq_net(net: &SeqNet, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0);
    let mut b = LayoutBuilder::new();
    net.declare(&mut b, 1.0);
    let p = b.build(&mut rng);
    let xs = inputs(&mut rng, 3, 2, net.input());
    let w = Tensor::from_vec(2, net.output(), rng.normals(2 * net.output()));
    max_rel_error(
        &p,
        |p| value_and_grad(&[p], |g| seq_objective(g, net, p, &xs, &w)).map(|(v, mut g)| (v, g.remove(0))),
        |p| {
            let mut be = Eval;
            let v = seq_objective(&mut be, net, p, &xs, &w).unwrap();
            be.value(&v).get(0, 0)
        },
    )
}

pub fn mlp_head(seed: u64) -> f64 {
    let mlp = Mlp::new("head", 5, &[6], 3);
    let mut rng = RngStream::new(seed, 1);
    let mut b = LayoutBuilder::new();
    mlp.declare(&mut b, 1.0);
    let p = b.build(&mut rng);
    let x = Tensor::from_vec(4, 5, rng.normals(20));
    let w = Tensor::from_vec(4, 3, rng.normals(12));
    fn run<B: Backend>(be: &mut B, mlp: &Mlp, p: &ParamVector, x: &Tensor, w: &Tensor) -> Result<B::V> {
        let bound = mlp.bind(be, 0, p)?;
        let xv = be.constant(x.clone());
        let y = bound.forward(be, &xv);
        let lin = be.mul_const(&y, w);
        let a = be.sum(&lin);
        let sq = be.sum_squares(&y);
        Ok(be.add(&a, &sq))
    }
    max_rel_error(
        &p,
        |p| value_and_grad(&[p], |g| run(g, &mlp, p, &x, &w)).map(|(v, mut g)| (v, g.remove(0))),
        |p| {
            let mut be = Eval;
            let v = run(&mut be, &mlp, p, &x, &w).unwrap();
            be.value(&v).get(0, 0)
        },
    )
}

pub fn recurrent_cell(seed: u64) -> f64 {
    let cell = GruCell::new("gru", 3, 4);
    let mut rng = RngStream::new(seed, 2);
    let mut b = LayoutBuilder::new();
    cell.declare(&mut b);
    let p = b.build(&mut rng);
    let xs = inputs(&mut rng, 4, 2, 3);
    let w = Tensor::from_vec(2, 4, rng.normals(8));
    fn run<B: Backend>(be: &mut B, cell: &GruCell, p: &ParamVector, xs: &[Tensor], w: &Tensor) -> Result<B::V> {
        let bound = cell.bind(be, 0, p)?;
        let mut h = be.constant(Tensor::zeros(2, 4));
        for x in xs {
            let xv = be.constant(x.clone());
            h = bound.step(be, &xv, &h);
        }
        let lin = be.mul_const(&h, w);
        Ok(be.sum(&lin))
    }
    max_rel_error(
        &p,
        |p| value_and_grad(&[p], |g| run(g, &cell, p, &xs, &w)).map(|(v, mut g)| (v, g.remove(0))),
        |p| {
            let mut be = Eval;
            let v = run(&mut be, &cell, p, &xs, &w).unwrap();
            be.value(&v).get(0, 0)
        },
    )
}

pub fn dynamics_network(seed: u64) -> f64 {
    let arch = DynamicsArch {
        state_dim: 3,
        action_dim: 2,
        hidden: 4,
        head_hidden: 5,
    };
    check_seq_net(&arch.net(), seed)
}

fn vae_arch() -> VaeArch {
    VaeArch {
        state_dim: 2,
        action_dim: 1,
        latent_dim: 2,
        hidden: 4,
        head_hidden: 4,
    }
}

pub fn decoder(seed: u64) -> f64 {
    check_seq_net(&vae_arch().decoder(), seed)
}

/// Encoder through the reparameterised latent and its KL term, as in the
/// training objective.
pub fn encoder(seed: u64) -> f64 {
    let arch = vae_arch();
    let net = arch.encoder();
    let l = arch.latent_dim;
    let mut rng = RngStream::new(seed, 3);
    let mut b = LayoutBuilder::new();
    net.declare(&mut b, 1.0);
    let p = b.build(&mut rng);
    let xs = inputs(&mut rng, 3, 2, net.input());
    let eps = inputs(&mut rng, 3, 2, l);
    fn run<B: Backend>(
        be: &mut B,
        net: &SeqNet,
        l: usize,
        p: &ParamVector,
        xs: &[Tensor],
        eps: &[Tensor],
    ) -> Result<B::V> {
        let bound = net.bind(be, 0, p)?;
        let mut h = be.constant(Tensor::zeros(2, net.hidden()));
        let mut acc = be.constant(Tensor::scalar(0.0));
        for (x, e) in xs.iter().zip(eps) {
            let xv = be.constant(x.clone());
            let (q, h2) = bound.step(be, &xv, &h);
            h = h2;
            let mean = be.slice_cols(&q, 0, l);
            let raw = be.slice_cols(&q, l, 2 * l);
            let logvar = be.soft_clamp(&raw, LOGVAR_MIN, LOGVAR_MAX);
            let z = reparameterize_v(be, &mean, &logvar, e);
            let zz = be.sum_squares(&z);
            let kl = kl_to_standard_normal_v(be, &mean, &logvar);
            acc = be.add(&acc, &zz);
            acc = be.add(&acc, &kl);
        }
        Ok(acc)
    }
    max_rel_error(
        &p,
        |p| value_and_grad(&[p], |g| run(g, &net, l, p, &xs, &eps)).map(|(v, mut g)| (v, g.remove(0))),
        |p| {
            let mut be = Eval;
            let v = run(&mut be, &net, l, p, &xs, &eps).unwrap();
            be.value(&v).get(0, 0)
        },
    )
}

pub const ARCHITECTURES: [(&str, fn(u64) -> f64); 5] = [
    ("mlp-head", mlp_head),
    ("recurrent-cell", recurrent_cell),
    ("dynamics-network", dynamics_network),
    ("encoder", encoder),
    ("decoder", decoder),
];
