//! Small dense-array math with hand-written backward passes.
//!
//! Everything is `f64` and single-threaded; shapes are checked at runtime.

mod attention;
mod conv;
mod dense;
mod gradcheck;
mod params;

pub use attention::{aggregate, aggregate_backward, softmax_along, softmax_along_backward, AttentionPair};
pub use conv::{conv1d, conv1d_backward, deconv1d_x2, deconv1d_x2_backward, split_halves};
pub use dense::{dense, dense_backward, relu, relu_backward};
pub use gradcheck::{finite_diff_grad, max_rel_error, rel_error, GRAD_REL_FLOOR};
pub use params::{Checkpoint, ParamSet, Tensor};

use crate::error::{check_len, Error, Result};

/// A `rows x cols` single-channel map, row-major. Rows run along Y.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// A `height x width x channels` feature grid, channel-last row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
        }
        check_len("grid data", height * width * channels, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("grid contains non-finite values".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        let i = self.idx(y, x, c);
        &mut self.data[i]
    }

    /// Feature vector at one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.idx(y, x, 0);
        &self.data[i..i + self.channels]
    }

    /// Linear combination `a * self + b * other` (same shape).
    pub fn combine(&self, a: f64, other: &Grid, b: f64) -> Grid {
        let data = self.data.iter().zip(&other.data).map(|(u, v)| a * u + b * v).collect();
        Grid { data, ..*self }
    }
}

/// A 1-D feature map: `len` positions by `channels`, position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq {
    pub len: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Seq {
    pub fn zeros(len: usize, channels: usize) -> Self {
        Self { len, channels, data: vec![0.0; len * channels] }
    }

    pub fn from_vec(len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_len("sequence data", len * channels, data.len())?;
        Ok(Self { len, channels, data })
    }

    #[inline]
    pub fn at(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, c: usize) -> &mut f64 {
        &mut self.data[i * self.channels + c]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Concatenates two sequences along the position axis.
    pub fn concat(a: &Seq, b: &Seq) -> Result<Seq> {
        check_len("concat channels", a.channels, b.channels)?;
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Ok(Seq { len: a.len + b.len, channels: a.channels, data })
    }
}
