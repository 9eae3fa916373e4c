//! Dense f64 containers used throughout the crate.
//!
//! [`Tensor`] is a plain shaped buffer used for parameters and batches.
//! [`FeatureMap`] and [`TokenSequence`] are the two views the MS2D block
//! moves between: a channels-last patch grid and its serialized 1D form.
//! Both store one token's channels contiguously, so serialization is a
//! gather of whole rows.

use crate::error::{Error, Result};
use crate::scan_catalog::GridShape;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("{n} elements for shape {shape:?}"), data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// An H x W grid of C-channel tokens, stored token-major (row-major patch
/// index, then channel).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    shape: GridShape,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(shape: GridShape, channels: usize) -> Self {
        FeatureMap {
            shape,
            channels,
            data: vec![0.0; shape.len() * channels],
        }
    }

    pub fn from_vec(shape: GridShape, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() * channels {
            return Err(Error::shape(
                format!("{}x{}x{}", shape.rows, shape.cols, channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(FeatureMap { shape, channels, data })
    }

    /// Builds a map from a closure over (row, col, channel).
    pub fn from_fn(shape: GridShape, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len() * channels);
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        FeatureMap { shape, channels, data }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.shape.cols + col) * self.channels + ch]
    }

    pub fn token(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn token_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
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

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check(&self, shape: GridShape, channels: usize) -> Result<()> {
        if self.shape != shape || self.channels != channels {
            return Err(Error::shape(
                format!("{}x{}x{}", shape.rows, shape.cols, channels),
                format!("{}x{}x{}", self.shape.rows, self.shape.cols, self.channels),
            ));
        }
        Ok(())
    }
}

/// L tokens of C channels each.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn zeros(len: usize, channels: usize) -> Self {
        TokenSequence {
            len,
            channels,
            data: vec![0.0; len * channels],
        }
    }

    pub fn from_vec(len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * channels {
            return Err(Error::shape(
                format!("{len}x{channels}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(TokenSequence { len, channels, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn token_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
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

    pub fn max_abs_diff(&self, other: &TokenSequence) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sequence with token order reversed.
    pub fn reversed(&self) -> TokenSequence {
        let mut data = Vec::with_capacity(self.data.len());
        for t in (0..self.len).rev() {
            data.extend_from_slice(self.token(t));
        }
        TokenSequence {
            len: self.len,
            channels: self.channels,
            data,
        }
    }
}
