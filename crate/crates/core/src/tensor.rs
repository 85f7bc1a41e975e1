//! Dense per-head arrays laid out head-major: `[H, L, d]`.

use crate::error::{MocError, Result};

/// A contiguous `[heads, len, dim]` array of `f64`, row-major with heads outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    heads: usize,
    len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl HeadTensor {
    pub fn zeros(heads: usize, len: usize, dim: usize) -> Self {
        Self {
            heads,
            len,
            dim,
            data: vec![0.0; heads * len * dim],
        }
    }

    pub fn from_vec(heads: usize, len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * len * dim {
            return Err(MocError::ShapeMismatch(format!(
                "buffer of {} values cannot hold [{heads}, {len}, {dim}]",
                data.len()
            )));
        }
        Ok(Self {
            heads,
            len,
            dim,
            data,
        })
    }

    pub fn from_fn(
        heads: usize,
        len: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(heads * len * dim);
        for h in 0..heads {
            for t in 0..len {
                for c in 0..dim {
                    data.push(f(h, t, c));
                }
            }
        }
        Self {
            heads,
            len,
            dim,
            data,
        }
    }

    #[inline]
    pub fn heads(&self) -> usize {
        self.heads
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.heads, self.len, self.dim]
    }

    #[inline]
    pub fn row(&self, head: usize, token: usize) -> &[f64] {
        let off = (head * self.len + token) * self.dim;
        &self.data[off..off + self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, head: usize, token: usize) -> &mut [f64] {
        let off = (head * self.len + token) * self.dim;
        &mut self.data[off..off + self.dim]
    }

    /// All rows of one head as a `[len * dim]` slice.
    #[inline]
    pub fn head(&self, head: usize) -> &[f64] {
        let stride = self.len * self.dim;
        &self.data[head * stride..(head + 1) * stride]
    }

    pub fn head_mut(&mut self, head: usize) -> &mut [f64] {
        let stride = self.len * self.dim;
        &mut self.data[head * stride..(head + 1) * stride]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, head: usize, token: usize, c: usize) -> f64 {
        self.data[(head * self.len + token) * self.dim + c]
    }

    pub fn set(&mut self, head: usize, token: usize, c: usize, value: f64) {
        self.data[(head * self.len + token) * self.dim + c] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps only the listed tokens, in the given order.
    pub fn select_tokens(&self, tokens: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.heads * tokens.len() * self.dim);
        for h in 0..self.heads {
            for &t in tokens {
                data.extend_from_slice(self.row(h, t));
            }
        }
        Self {
            heads: self.heads,
            len: tokens.len(),
            dim: self.dim,
            data,
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest elementwise `|a - b| / max(|b|, floor)`.
pub fn max_rel_err(actual: &[f64], expected: &[f64], floor: f64) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| (a - e).abs() / e.abs().max(floor))
        .fold(0.0, f64::max)
}
