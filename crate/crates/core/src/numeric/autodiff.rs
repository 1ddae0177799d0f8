//! Reverse-mode differentiation over batched matrices.
//!
//! Network code is written once against [`Backend`]. [`Eval`] computes values
//! only; [`Graph`] additionally records every operation on a tape so that
//! [`Graph::backward`] can propagate adjoints from a scalar loss to the
//! parameter leaves.

use super::params::ParamVector;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub trait Backend {
    type V: Clone;

    fn constant(&mut self, t: Tensor) -> Self::V;
    /// Binds a named segment of `params`; `slot` identifies which parameter
    /// vector gradients are routed to.
    fn param(&mut self, slot: usize, params: &ParamVector, name: &str) -> Result<Self::V>;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add_row(&mut self, a: &Self::V, bias: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul_const(&mut self, a: &Self::V, c: &Tensor) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn exp(&mut self, a: &Self::V) -> Self::V;
    /// Smoothly squashes values into `(lo, hi)`.
    fn soft_clamp(&mut self, a: &Self::V, lo: f64, hi: f64) -> Self::V;
    fn slice_cols(&mut self, a: &Self::V, start: usize, end: usize) -> Self::V;
    fn concat_cols(&mut self, parts: &[&Self::V]) -> Self::V;
    /// Sum of all entries as a `1 x 1` value.
    fn sum(&mut self, a: &Self::V) -> Self::V;

    fn sum_squares(&mut self, a: &Self::V) -> Self::V {
        let sq = self.mul(a, a);
        self.sum(&sq)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn soft_clamp_scalar(x: f64, lo: f64, hi: f64) -> f64 {
    let upper = hi - softplus(hi - x);
    // the outer softplus overshoots `hi` by at most e^-(hi-lo)
    (lo + softplus(upper - lo)).min(hi)
}

#[inline]
fn soft_clamp_deriv(x: f64, lo: f64, hi: f64) -> f64 {
    let upper = hi - softplus(hi - x);
    sigmoid(hi - x) * sigmoid(upper - lo)
}

/// Value-only backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, _slot: usize, params: &ParamVector, name: &str) -> Result<Tensor> {
        params.segment(name)
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.matmul(b)
    }
    fn add_row(&mut self, a: &Tensor, bias: &Tensor) -> Tensor {
        a.add_row(bias)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip_map(b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip_map(b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.zip_map(b, |x, y| x * y)
    }
    fn mul_const(&mut self, a: &Tensor, c: &Tensor) -> Tensor {
        a.zip_map(c, |x, y| x * y)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        a.map(|x| x * c)
    }
    fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        a.map(|x| x + c)
    }
    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        a.map(sigmoid)
    }
    fn tanh(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::tanh)
    }
    fn exp(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::exp)
    }
    fn soft_clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Tensor {
        a.map(|x| soft_clamp_scalar(x, lo, hi))
    }
    fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Tensor {
        a.slice_cols(start, end)
    }
    fn concat_cols(&mut self, parts: &[&Tensor]) -> Tensor {
        Tensor::concat_cols(parts)
    }
    fn sum(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Tensor),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    SoftClamp(usize, f64, f64),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    Sum(usize),
}

#[derive(Debug)]
struct ParamLeaf {
    node: usize,
    slot: usize,
    name: String,
    range: std::ops::Range<usize>,
}

/// Recording backend.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    params: Vec<ParamLeaf>,
}

/// Adjoints of every node after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.0].get(0, 0)
    }

    /// Propagates adjoints from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.values.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let (r, c) = self.values[loss.0].shape();
        assert_eq!((r, c), (1, 1), "backward needs a scalar loss");
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let y = &self.values[i];
            match &self.ops[i] {
                Op::Leaf => {}
                &Op::MatMul(a, b) => {
                    let ga = g.matmul_t(&self.values[b]);
                    let gb = self.values[a].t_matmul(&g);
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                &Op::AddRow(a, b) => {
                    acc(&mut grads, b, g.sum_rows());
                    acc(&mut grads, a, g.clone());
                }
                &Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                &Op::Sub(a, b) => {
                    acc(&mut grads, b, g.map(|v| -v));
                    acc(&mut grads, a, g.clone());
                }
                &Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.values[b], |g, v| g * v);
                    let gb = g.zip_map(&self.values[a], |g, v| g * v);
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, g.zip_map(c, |g, v| g * v)),
                &Op::Scale(a, c) => acc(&mut grads, a, g.map(|v| v * c)),
                &Op::AddScalar(a) => acc(&mut grads, a, g.clone()),
                &Op::Sigmoid(a) => acc(&mut grads, a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
                &Op::Tanh(a) => acc(&mut grads, a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
                &Op::Exp(a) => acc(&mut grads, a, g.zip_map(y, |g, y| g * y)),
                &Op::SoftClamp(a, lo, hi) => {
                    let ga = g.zip_map(&self.values[a], |g, x| g * soft_clamp_deriv(x, lo, hi));
                    acc(&mut grads, a, ga);
                }
                &Op::SliceCols(a, start, _end) => {
                    let (rows, cols) = self.values[a].shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let src = g.row_slice(r);
                        ga.row_slice_mut(r)[start..start + src.len()].copy_from_slice(src);
                    }
                    acc(&mut grads, a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.values[p].cols();
                        acc(&mut grads, p, g.slice_cols(offset, offset + w));
                        offset += w;
                    }
                }
                &Op::Sum(a) => {
                    let (rows, cols) = self.values[a].shape();
                    acc(&mut grads, a, Tensor::filled(rows, cols, g.get(0, 0)));
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Flattened gradient for the parameter vector bound under `slot`.
    /// Segments never bound on this graph receive zero gradient.
    pub fn param_gradient(&self, grads: &Gradients, slot: usize, params: &ParamVector) -> Result<Vec<f64>> {
        let mut out = vec![0.0; params.len()];
        for leaf in self.params.iter().filter(|l| l.slot == slot) {
            if let Some(g) = &grads.grads[leaf.node] {
                if !g.is_finite() {
                    return Err(Error::Numeric {
                        segment: leaf.name.clone(),
                    });
                }
                for (o, v) in out[leaf.range.clone()].iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }
}

impl Backend for Graph {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn param(&mut self, slot: usize, params: &ParamVector, name: &str) -> Result<Var> {
        let seg = params
            .layout()
            .find(name)
            .ok_or_else(|| Error::dim(format!("no parameter segment `{name}`")))?
            .clone();
        let t = Tensor::from_vec(seg.rows, seg.cols, params.values()[seg.range()].to_vec());
        let v = self.push(t, Op::Leaf);
        self.params.push(ParamLeaf {
            node: v.0,
            slot,
            name: seg.name.clone(),
            range: seg.range(),
        });
        Ok(v)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.values[v.0]
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let t = self.values[a.0].matmul(&self.values[b.0]);
        self.push(t, Op::MatMul(a.0, b.0))
    }
    fn add_row(&mut self, a: &Var, bias: &Var) -> Var {
        let t = self.values[a.0].add_row(&self.values[bias.0]);
        self.push(t, Op::AddRow(a.0, bias.0))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let t = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        self.push(t, Op::Add(a.0, b.0))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let t = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        self.push(t, Op::Sub(a.0, b.0))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let t = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        self.push(t, Op::Mul(a.0, b.0))
    }
    fn mul_const(&mut self, a: &Var, c: &Tensor) -> Var {
        let t = self.values[a.0].zip_map(c, |x, y| x * y);
        self.push(t, Op::MulConst(a.0, c.clone()))
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let t = self.values[a.0].map(|x| x * c);
        self.push(t, Op::Scale(a.0, c))
    }
    fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        let t = self.values[a.0].map(|x| x + c);
        self.push(t, Op::AddScalar(a.0))
    }
    fn sigmoid(&mut self, a: &Var) -> Var {
        let t = self.values[a.0].map(sigmoid);
        self.push(t, Op::Sigmoid(a.0))
    }
    fn tanh(&mut self, a: &Var) -> Var {
        let t = self.values[a.0].map(f64::tanh);
        self.push(t, Op::Tanh(a.0))
    }
    fn exp(&mut self, a: &Var) -> Var {
        let t = self.values[a.0].map(f64::exp);
        self.push(t, Op::Exp(a.0))
    }
    fn soft_clamp(&mut self, a: &Var, lo: f64, hi: f64) -> Var {
        let t = self.values[a.0].map(|x| soft_clamp_scalar(x, lo, hi));
        self.push(t, Op::SoftClamp(a.0, lo, hi))
    }
    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Var {
        let t = self.values[a.0].slice_cols(start, end);
        self.push(t, Op::SliceCols(a.0, start, end))
    }
    fn concat_cols(&mut self, parts: &[&Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|p| &self.values[p.0]).collect();
        let t = Tensor::concat_cols(&ts);
        self.push(t, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }
    fn sum(&mut self, a: &Var) -> Var {
        let t = Tensor::scalar(self.values[a.0].sum());
        self.push(t, Op::Sum(a.0))
    }
}

/// Evaluates `f` on a fresh graph and returns the loss together with its
/// gradient with respect to every parameter vector in `params` (by slot).
pub fn value_and_grad<F>(params: &[&ParamVector], f: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g)?;
    let value = g.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::Numeric { segment: "loss".into() });
    }
    let grads = g.backward(loss);
    let per_slot = params
        .iter()
        .enumerate()
        .map(|(slot, p)| g.param_gradient(&grads, slot, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, per_slot))
}

/// Single-parameter-vector convenience form of [`value_and_grad`].
pub fn grad<F>(params: &ParamVector, f: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let (_, mut g) = value_and_grad(&[params], f)?;
    Ok(g.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::params::{Init, LayoutBuilder};
    use crate::numeric::rng::RngStream;

    fn scalar_param(x: f64) -> ParamVector {
        let mut b = LayoutBuilder::new();
        b.push("x", 1, 1, Init::Zeros);
        let mut p = b.zeros();
        p.values_mut()[0] = x;
        p
    }

    #[test]
    fn square_gradient_matches_central_difference() {
        let p = scalar_param(3.0);
        let g = grad(&p, |gr| {
            let x = gr.param(0, &p, "x")?;
            Ok(gr.sum_squares(&x))
        })
        .unwrap();
        assert_eq!(g, vec![6.0]);
        let h = 1e-5;
        let fd = ((3.0f64 + h).powi(2) - (3.0f64 - h).powi(2)) / (2.0 * h);
        assert!((g[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn soft_clamp_stays_in_range_and_is_near_identity_inside() {
        for x in [-50.0, -10.0, -3.0, 0.0, 2.0, 4.0, 50.0] {
            let y = soft_clamp_scalar(x, -10.0, 4.0);
            assert!((-10.0..=4.0).contains(&y), "{x} -> {y}");
        }
        assert!((soft_clamp_scalar(-3.0, -10.0, 4.0) - -3.0).abs() < 0.01);
        let h = 1e-6;
        for x in [-9.0, -1.0, 3.5] {
            let fd = (soft_clamp_scalar(x + h, -10.0, 4.0) - soft_clamp_scalar(x - h, -10.0, 4.0)) / (2.0 * h);
            assert!((fd - soft_clamp_deriv(x, -10.0, 4.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = scalar_param(1000.0);
        let err = grad(&p, |gr| {
            let x = gr.param(0, &p, "x")?;
            let e = gr.exp(&x);
            Ok(gr.sum(&e))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut b = LayoutBuilder::new();
        b.push("a", 3, 4, Init::Uniform(1.0));
        b.push("w", 4, 2, Init::Uniform(1.0));
        b.push("bias", 1, 2, Init::Uniform(1.0));
        let mut rng = RngStream::new(5, 5);
        let p = b.build(&mut rng);
        let mask = Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.1, 0.3, 0.7]);

        fn f<B: Backend>(be: &mut B, p: &ParamVector, mask: &Tensor) -> Result<B::V> {
            let a = be.param(0, p, "a")?;
            let w = be.param(0, p, "w")?;
            let bias = be.param(0, p, "bias")?;
            let h = be.matmul(&a, &w);
            let h = be.add_row(&h, &bias);
            let s = be.sigmoid(&h);
            let t = be.tanh(&h);
            let m = be.mul(&s, &t);
            let left = be.slice_cols(&a, 0, 2);
            let sum = be.add(&m, &left);
            let e = be.exp(&sum);
            let c = be.soft_clamp(&e, -1.0, 2.0);
            let d = be.sub(&c, &s);
            let d = be.mul_const(&d, mask);
            let d = be.scale(&d, 1.7);
            let d = be.add_scalar(&d, 0.3);
            let cat = be.concat_cols(&[&d, &t]);
            Ok(be.sum_squares(&cat))
        }

        let g = grad(&p, |gr| f(gr, &p, &mask)).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values_mut()[i] += h;
            let mut minus = p.clone();
            minus.values_mut()[i] -= h;
            let fp = f(&mut Eval, &plus, &mask).unwrap().get(0, 0);
            let fm = f(&mut Eval, &minus, &mask).unwrap().get(0, 0);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-6, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
    }
}
