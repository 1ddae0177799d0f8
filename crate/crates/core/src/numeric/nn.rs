//! Feed-forward layers and the gated recurrent cell.
//!
//! Layer descriptors only know their shapes and segment names. Binding a
//! descriptor to a backend and a parameter vector yields a `Bound*` value that
//! can be applied repeatedly, so parameters are fetched once per graph.

use serde::{Deserialize, Serialize};

use super::autodiff::Backend;
use super::params::{Init, LayoutBuilder, ParamVector};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

pub struct BoundLinear<V> {
    w: V,
    b: V,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn declare(&self, b: &mut LayoutBuilder, init: Init) {
        b.push(format!("{}.w", self.name), self.input, self.output, init);
        b.push(format!("{}.b", self.name), 1, self.output, Init::Zeros);
    }

    pub fn bind<B: Backend>(&self, be: &mut B, slot: usize, p: &ParamVector) -> Result<BoundLinear<B::V>> {
        Ok(BoundLinear {
            w: be.param(slot, p, &format!("{}.w", self.name))?,
            b: be.param(slot, p, &format!("{}.b", self.name))?,
        })
    }
}

impl<V> BoundLinear<V> {
    pub fn forward<B: Backend<V = V>>(&self, be: &mut B, x: &V) -> V {
        let h = be.matmul(x, &self.w);
        be.add_row(&h, &self.b)
    }
}

/// `tanh` hidden layers followed by a linear output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct BoundMlp<V> {
    layers: Vec<BoundLinear<V>>,
}

impl Mlp {
    pub fn new(name: &str, input: usize, hidden: &[usize], output: usize) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.l{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    /// The output layer is initialised with `output_scale` so freshly built
    /// networks start close to a zero prediction.
    pub fn declare(&self, b: &mut LayoutBuilder, output_scale: f64) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if i == last {
                let a = output_scale * (6.0 / (l.input + l.output) as f64).sqrt();
                l.declare(b, Init::Uniform(a));
            } else {
                l.declare(b, Init::Glorot);
            }
        }
    }

    pub fn bind<B: Backend>(&self, be: &mut B, slot: usize, p: &ParamVector) -> Result<BoundMlp<B::V>> {
        Ok(BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(be, slot, p)).collect::<Result<_>>()?,
        })
    }
}

impl<V> BoundMlp<V> {
    pub fn forward<B: Backend<V = V>>(&self, be: &mut B, x: &V) -> V {
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].forward(be, x);
        if last == 0 {
            return h;
        }
        h = be.tanh(&h);
        for (i, l) in self.layers.iter().enumerate().skip(1) {
            h = l.forward(be, &h);
            if i != last {
                h = be.tanh(&h);
            }
        }
        h
    }
}

/// Gated recurrent cell with update and reset gates:
///
/// ```text
/// r  = σ(x Wr + h Ur + br)
/// u  = σ(x Wu + h Uu + bu)
/// n  = tanh(x Wn + bn + r ⊙ (h Un + bhn))
/// h' = n + u ⊙ (h − n)
/// ```
///
/// The three input and recurrent projections are stored fused as
/// `input x 3·hidden` and `hidden x 3·hidden` matrices in `[r | u | n]` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

pub struct BoundGru<V> {
    hidden: usize,
    w_x: V,
    w_h: V,
    b_x: V,
    b_h: V,
}

impl GruCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn declare(&self, b: &mut LayoutBuilder) {
        let h3 = 3 * self.hidden;
        b.push(format!("{}.w_x", self.name), self.input, h3, Init::Glorot);
        b.push(
            format!("{}.w_h", self.name),
            self.hidden,
            h3,
            Init::Uniform(1.0 / (self.hidden as f64).sqrt()),
        );
        b.push(format!("{}.b_x", self.name), 1, h3, Init::Zeros);
        b.push(format!("{}.b_h", self.name), 1, h3, Init::Zeros);
    }

    pub fn bind<B: Backend>(&self, be: &mut B, slot: usize, p: &ParamVector) -> Result<BoundGru<B::V>> {
        Ok(BoundGru {
            hidden: self.hidden,
            w_x: be.param(slot, p, &format!("{}.w_x", self.name))?,
            w_h: be.param(slot, p, &format!("{}.w_h", self.name))?,
            b_x: be.param(slot, p, &format!("{}.b_x", self.name))?,
            b_h: be.param(slot, p, &format!("{}.b_h", self.name))?,
        })
    }
}

impl<V> BoundGru<V> {
    pub fn step<B: Backend<V = V>>(&self, be: &mut B, x: &V, h: &V) -> V {
        let hd = self.hidden;
        let gx = be.matmul(x, &self.w_x);
        let gx = be.add_row(&gx, &self.b_x);
        let gh = be.matmul(h, &self.w_h);
        let gh = be.add_row(&gh, &self.b_h);

        let xr = be.slice_cols(&gx, 0, hd);
        let hr = be.slice_cols(&gh, 0, hd);
        let r = be.add(&xr, &hr);
        let r = be.sigmoid(&r);

        let xu = be.slice_cols(&gx, hd, 2 * hd);
        let hu = be.slice_cols(&gh, hd, 2 * hd);
        let u = be.add(&xu, &hu);
        let u = be.sigmoid(&u);

        let xn = be.slice_cols(&gx, 2 * hd, 3 * hd);
        let hn = be.slice_cols(&gh, 2 * hd, 3 * hd);
        let rn = be.mul(&r, &hn);
        let n = be.add(&xn, &rn);
        let n = be.tanh(&n);

        let diff = be.sub(h, &n);
        let gated = be.mul(&u, &diff);
        be.add(&n, &gated)
    }
}

/// A gated recurrent cell followed by an output head that sees both the new
/// hidden state and the raw input, plus a linear skip from input to output:
///
/// ```text
/// h' = gru(x, h)
/// y  = mlp([h' | x]) + x W_skip + b_skip
/// ```
///
/// The skip path makes maps that are linear in the input exactly
/// representable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqNet {
    pub gru: GruCell,
    pub head: Mlp,
    pub skip: Linear,
}

pub struct BoundSeqNet<V> {
    gru: BoundGru<V>,
    head: BoundMlp<V>,
    skip: BoundLinear<V>,
}

impl SeqNet {
    pub fn new(name: &str, input: usize, hidden: usize, head_hidden: usize, output: usize) -> Self {
        Self {
            gru: GruCell::new(format!("{name}.gru"), input, hidden),
            head: Mlp::new(&format!("{name}.head"), hidden + input, &[head_hidden], output),
            skip: Linear::new(format!("{name}.skip"), input, output),
        }
    }

    pub fn input(&self) -> usize {
        self.gru.input
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden
    }

    pub fn output(&self) -> usize {
        self.skip.output
    }

    pub fn declare(&self, b: &mut LayoutBuilder, output_scale: f64) {
        self.gru.declare(b);
        self.head.declare(b, output_scale);
        let a = output_scale * (6.0 / (self.skip.input + self.skip.output) as f64).sqrt();
        self.skip.declare(b, Init::Uniform(a));
    }

    pub fn bind<B: Backend>(&self, be: &mut B, slot: usize, p: &ParamVector) -> Result<BoundSeqNet<B::V>> {
        Ok(BoundSeqNet {
            gru: self.gru.bind(be, slot, p)?,
            head: self.head.bind(be, slot, p)?,
            skip: self.skip.bind(be, slot, p)?,
        })
    }
}

impl<V> BoundSeqNet<V> {
    /// Returns `(output, new hidden state)`.
    pub fn step<B: Backend<V = V>>(&self, be: &mut B, x: &V, h: &V) -> (V, V) {
        let h = self.gru.step(be, x, h);
        let hx = be.concat_cols(&[&h, x]);
        let y = self.head.forward(be, &hx);
        let s = self.skip.forward(be, x);
        (be.add(&y, &s), h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::autodiff::Eval;
    use crate::numeric::rng::RngStream;
    use crate::numeric::tensor::Tensor;

    #[test]
    fn gru_keeps_state_when_update_gate_saturates() {
        let cell = GruCell::new("g", 1, 2);
        let mut b = LayoutBuilder::new();
        cell.declare(&mut b);
        let mut p = b.zeros();
        // b_x = [r r | u u | n n]; push the update gate to ~1
        let seg = p.layout().find("g.b_x").unwrap().clone();
        p.values_mut()[seg.start + 2] = 50.0;
        p.values_mut()[seg.start + 3] = 50.0;
        let mut be = Eval;
        let bound = cell.bind(&mut be, 0, &p).unwrap();
        let h = Tensor::row(&[0.3, -0.7]);
        let x = Tensor::row(&[1.0]);
        let out = bound.step(&mut be, &x, &h);
        assert!((out.get(0, 0) - 0.3).abs() < 1e-12);
        assert!((out.get(0, 1) + 0.7).abs() < 1e-12);
    }

    #[test]
    fn mlp_shapes() {
        let mlp = Mlp::new("m", 3, &[5, 4], 2);
        let mut b = LayoutBuilder::new();
        mlp.declare(&mut b, 1.0);
        let p = b.build(&mut RngStream::new(0, 0));
        assert_eq!(p.len(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
        let mut be = Eval;
        let bound = mlp.bind(&mut be, 0, &p).unwrap();
        let y = bound.forward(&mut be, &Tensor::zeros(7, 3));
        assert_eq!(y.shape(), (7, 2));
    }
}
