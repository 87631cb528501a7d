//! Named, flat parameter buffers and the arithmetic shared by every model.
//!
//! Models expose their weights as an ordered list of [`Buffer`]s. Gradients
//! use the same container type as the parameters they belong to, so a
//! gradient set is always shape-congruent with its parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named parameter tensor stored row-major as 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Frozen buffers receive zero gradient and are skipped by optimizers.
    #[serde(default)]
    pub frozen: bool,
}

impl Buffer {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Buffer {
            name: name.into(),
            shape,
            data: vec![0.0; len],
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `r` of a 2-D buffer.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    fn check_congruent(&self, other: &Buffer) -> Result<()> {
        if self.shape != other.shape || self.name != other.name {
            return Err(Error::Shape(format!(
                "buffer `{}` {:?} vs `{}` {:?}",
                self.name, self.shape, other.name, other.shape
            )));
        }
        Ok(())
    }
}

/// A model parameter collection. Gradients are represented by the same type.
pub trait ParamSet: Clone + Send + Sync {
    fn buffers(&self) -> Vec<&Buffer>;
    fn buffers_mut(&mut self) -> Vec<&mut Buffer>;

    /// A congruent set with every entry zero, freeze flags preserved.
    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for b in out.buffers_mut() {
            b.data.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    /// `self ← self − step · grads` on every unfrozen buffer.
    fn axpy_update(&mut self, grads: &Self, step: f64) -> Result<()> {
        let src = grads.buffers();
        let dst = self.buffers_mut();
        if src.len() != dst.len() {
            return Err(Error::Shape("parameter sets differ in buffer count".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.check_congruent(s)?;
            if d.frozen {
                continue;
            }
            for (x, g) in d.data.iter_mut().zip(&s.data) {
                *x -= step * g;
            }
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    fn add_assign(&mut self, other: &Self) -> Result<()> {
        let src = other.buffers();
        let dst = self.buffers_mut();
        if src.len() != dst.len() {
            return Err(Error::Shape("parameter sets differ in buffer count".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.check_congruent(s)?;
            for (x, g) in d.data.iter_mut().zip(&s.data) {
                *x += g;
            }
        }
        Ok(())
    }

    fn scale(&mut self, factor: f64) {
        for b in self.buffers_mut() {
            b.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn global_norm(&self) -> f64 {
        self.buffers()
            .iter()
            .flat_map(|b| b.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.data.iter().all(|x| x.is_finite()))
    }

    /// Bitwise equality of every buffer (distinguishes `0.0` from `-0.0`).
    fn bitwise_eq(&self, other: &Self) -> bool {
        let a = self.buffers();
        let b = other.buffers();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.name == y.name
                    && x.shape == y.shape
                    && x.data.len() == y.data.len()
                    && x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    /// Largest elementwise absolute difference.
    fn max_abs_diff(&self, other: &Self) -> f64 {
        self.buffers()
            .iter()
            .zip(other.buffers())
            .flat_map(|(a, b)| a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Scales `grads` in place so its global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
