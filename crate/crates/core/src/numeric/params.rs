//! Flat parameter storage with a named segment layout.

use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }
}

/// How a segment is filled at construction time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// Uniform in `±scale`.
    Uniform(f64),
}

/// Ordered, contiguous, non-overlapping segments.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len())
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Name of the segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&str> {
        self.segments
            .iter()
            .find(|s| s.range().contains(&i))
            .map(|s| s.name.as_str())
    }

    /// Checks that segments tile `0..total_len` with unique names.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.start != cursor {
                return Err(Error::Integrity(format!(
                    "segment `{}` starts at {} but previous ended at {}",
                    s.name, s.start, cursor
                )));
            }
            if self.segments[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Integrity(format!("duplicate segment `{}`", s.name)));
            }
            cursor += s.len();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct LayoutBuilder {
    layout: Layout,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) {
        let start = self.layout.total_len();
        self.layout.segments.push(Segment {
            name: name.into(),
            start,
            rows,
            cols,
        });
        self.inits.push(init);
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Draws initial values from `rng`.
    pub fn build(self, rng: &mut RngStream) -> ParamVector {
        let mut values = vec![0.0; self.layout.total_len()];
        for (seg, init) in self.layout.segments.iter().zip(&self.inits) {
            let slot = &mut values[seg.range()];
            match *init {
                Init::Zeros => {}
                Init::Glorot => {
                    let a = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = rng.uniform(-a, a));
                }
                Init::Uniform(a) => slot.iter_mut().for_each(|v| *v = rng.uniform(-a, a)),
            }
        }
        ParamVector {
            values,
            layout: self.layout,
        }
    }

    pub fn zeros(self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.layout.total_len()],
            layout: self.layout,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.total_len() {
            return Err(Error::dim(format!(
                "parameter vector has {} values, layout needs {}",
                values.len(),
                layout.total_len()
            )));
        }
        let pv = Self { values, layout };
        pv.check_finite()?;
        Ok(pv)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Result<Tensor> {
        let seg = self
            .layout
            .find(name)
            .ok_or_else(|| Error::dim(format!("no parameter segment `{name}`")))?;
        Ok(Tensor::from_vec(seg.rows, seg.cols, self.values[seg.range()].to_vec()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric {
                segment: self.layout.segment_of(i).unwrap_or("?").to_string(),
            }),
        }
    }
}
