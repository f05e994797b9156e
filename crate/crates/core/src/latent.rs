//! Latent states: flat real vectors with a logical (channels, h, w) token grid.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Logical layout of a latent vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Shape {
    pub fn new(channels: usize, grid_h: usize, grid_w: usize) -> Self {
        Shape { channels, grid_h, grid_w }
    }

    /// 1x1x1: plain scalar state.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.grid_h, self.grid_w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentError {
    LengthMismatch { expected: usize, got: usize },
    ShapeMismatch { left: Shape, right: Shape },
    NonFinite { index: usize },
}

impl fmt::Display for LatentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatentError::LengthMismatch { expected, got } => {
                write!(f, "data length {got} does not match shape length {expected}")
            }
            LatentError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left} vs {right}")
            }
            LatentError::NonFinite { index } => {
                write!(f, "non-finite entry at flat index {index}")
            }
        }
    }
}

impl core::error::Error for LatentError {}

/// The quantity integrated by the flow ODE. Layout is channel-major:
/// `data[c * h * w + y * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    data: Vec<f64>,
    shape: Shape,
}

impl LatentState {
    pub fn new(data: Vec<f64>, shape: Shape) -> Result<Self, LatentError> {
        if data.len() != shape.len() {
            return Err(LatentError::LengthMismatch { expected: shape.len(), got: data.len() });
        }
        Ok(LatentState { data, shape })
    }

    pub fn zeros(shape: Shape) -> Self {
        LatentState { data: vec![0.0; shape.len()], shape }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        LatentState { data: vec![value; shape.len()], shape }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..shape.len()).map(|i| f(i)).collect();
        LatentState { data, shape }
    }

    /// 1x1x1 state holding a single value.
    pub fn scalar(value: f64) -> Self {
        LatentState { data: vec![value], shape: Shape::scalar() }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<(), LatentError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(LatentError::NonFinite { index }),
            None => Ok(()),
        }
    }

    fn check_same_shape(&self, other: &LatentState) -> Result<(), LatentError> {
        if self.shape != other.shape {
            return Err(LatentError::ShapeMismatch { left: self.shape, right: other.shape });
        }
        Ok(())
    }

    /// `self += a * x`. Panics on shape mismatch (internal arithmetic only).
    pub fn axpy(&mut self, a: f64, x: &LatentState) {
        assert_eq!(self.shape, x.shape, "axpy shape mismatch");
        for (s, v) in self.data.iter_mut().zip(x.data.iter()) {
            *s += a * v;
        }
    }

    pub fn add(&self, other: &LatentState) -> Result<LatentState, LatentError> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(LatentState { data, shape: self.shape })
    }

    pub fn sub(&self, other: &LatentState) -> Result<LatentState, LatentError> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(LatentState { data, shape: self.shape })
    }

    pub fn scaled(&self, a: f64) -> LatentState {
        LatentState { data: self.data.iter().map(|v| a * v).collect(), shape: self.shape }
    }

    pub fn norm_l2(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| {
            let a = libm::fabs(*v);
            if a > m {
                a
            } else {
                m
            }
        })
    }

    /// `||self - other||_2` without allocating the difference.
    pub fn dist_l2(&self, other: &LatentState) -> f64 {
        assert_eq!(self.shape, other.shape, "dist shape mismatch");
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = a - b;
            acc += d * d;
        }
        libm::sqrt(acc)
    }

    pub fn dist_linf(&self, other: &LatentState) -> f64 {
        assert_eq!(self.shape, other.shape, "dist shape mismatch");
        let mut m = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = libm::fabs(a - b);
            if d > m {
                m = d;
            }
        }
        m
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Value at (channel, y, x).
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let s = self.shape;
        self.data[c * s.grid_h * s.grid_w + y * s.grid_w + x]
    }

    /// One channel as a flat h*w plane.
    pub fn channel_plane(&self, c: usize) -> &[f64] {
        let s = self.shape;
        let n = s.grid_h * s.grid_w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn describe(&self) -> String {
        alloc::format!("latent {} (len {})", self.shape, self.data.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_length() {
        let err = LatentState::new(vec![1.0, 2.0], Shape::new(1, 1, 3)).unwrap_err();
        assert_eq!(err, LatentError::LengthMismatch { expected: 3, got: 2 });
    }

    #[test]
    fn norms_and_distance() {
        let x = LatentState::new(vec![3.0, 4.0], Shape::new(2, 1, 1)).unwrap();
        let y = LatentState::zeros(Shape::new(2, 1, 1));
        assert_eq!(x.norm_l2(), 5.0);
        assert_eq!(x.norm_linf(), 4.0);
        assert_eq!(x.dist_l2(&y), 5.0);
        assert_eq!(x.dist_linf(&y), 4.0);
    }

    #[test]
    fn axpy_accumulates() {
        let mut x = LatentState::scalar(1.0);
        x.axpy(0.5, &LatentState::scalar(4.0));
        assert_eq!(x.data()[0], 3.0);
    }

    #[test]
    fn finite_check_reports_index() {
        let mut x = LatentState::zeros(Shape::new(1, 1, 3));
        x.data_mut()[2] = f64::NAN;
        assert_eq!(x.check_finite(), Err(LatentError::NonFinite { index: 2 }));
    }

    #[test]
    fn indexing_is_channel_major() {
        let s = Shape::new(2, 2, 3);
        let x = LatentState::from_fn(s, |i| i as f64);
        assert_eq!(x.at(1, 1, 2), (1 * 6 + 1 * 3 + 2) as f64);
        assert_eq!(x.channel_plane(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
