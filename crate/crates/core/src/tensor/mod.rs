//! Dense rank-4 tensors and the forward/backward kernels used to build small
//! convolutional networks around normalization layers.
//!
//! All values are `f64`, stored row-major in `(n, c, h, w)` order.

mod conv;
mod ops;

pub use conv::{conv2d, conv2d_direct, conv2d_grad, conv2d_grad_with, conv2d_with, ConvParams};
pub use ops::{
    add, global_avg_pool, global_avg_pool_grad, linear, linear_grad, relu, relu_grad, softmax_cross_entropy, LinearGrads,
};

use crate::error::{Error, Result};

/// Shape of a [`Tensor4`] as `(samples, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one `(n, c)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Config(format!("tensor of shape {shape} needs {} values, got {}", shape.len(), data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// The contiguous `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.shape.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    /// Samples `start..start + count` as a new tensor.
    pub fn slice_samples(&self, start: usize, count: usize) -> Tensor4 {
        let s = self.shape.sample_len();
        Tensor4 {
            shape: Shape4::new(count, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * s..(start + count) * s].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Tensor4, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Config(format!("{what}: shape mismatch {} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// Convolution filters laid out as `(out_channels, in_channels, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl FilterBank {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Config(format!("filter bank of shape {shape:?} needs {len} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn out_channels(&self) -> usize {
        self.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.shape[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Length of one output filter (`in_channels * kh * kw`).
    pub fn filter_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn filter(&self, oc: usize) -> &[f64] {
        let l = self.filter_len();
        &self.data[oc * l..(oc + 1) * l]
    }
}

/// A value together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub value: Tensor4,
    pub grad: Tensor4,
}

impl GradPair {
    pub fn new(value: Tensor4, grad: Tensor4) -> Result<Self> {
        value.ensure_same_shape(&grad, "grad pair")?;
        Ok(Self { value, grad })
    }

    pub fn zeroed(value: Tensor4) -> Self {
        let grad = Tensor4::zeros(value.shape());
        Self { value, grad }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_is_checked() {
        assert!(Tensor4::new(Shape4::new(1, 2, 2, 2), vec![0.0; 7]).is_err());
        assert!(FilterBank::new([1, 1, 3, 3], vec![0.0; 9]).is_ok());
        let a = Tensor4::zeros(Shape4::new(1, 1, 2, 2));
        let b = Tensor4::zeros(Shape4::new(1, 1, 2, 1));
        assert!(GradPair::new(a, b).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor4::from_fn(Shape4::new(2, 3, 2, 2), |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f64);
        assert_eq!(t.at(1, 2, 1, 0), 1210.0);
        assert_eq!(t.plane(1, 1), &[1100.0, 1101.0, 1110.0, 1111.0]);
        assert_eq!(t.slice_samples(1, 1).at(0, 0, 0, 1), 1001.0);
    }
}
