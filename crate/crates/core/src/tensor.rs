//! Dense NCHW tensor value type.
//!
//! `Tensor<f32>` is the training dtype; `Tensor<f64>` is the verification
//! dtype used by gradient checks and the physics oracles. Tensors are plain
//! values: cloning copies the data, and nothing here references a tape.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar element type: `f32` for training, `f64` for verification.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// NCHW shape. `n` is batch, `c` channels, `h`/`w` spatial extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Row-major flat index of element (n, c, h, w).
    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Spatial plane size h*w.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from row-major data. The length must match the shape.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidArg(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()], requires_grad: false, grad: None }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()], requires_grad: false, grad: None }
    }

    /// Scalar tensor of shape (1,1,1,1).
    pub fn scalar(value: T) -> Self {
        Self::full(Shape::new(1, 1, 1, 1), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.idx(n, c, h, w);
        self.data[i] = v;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark the tensor as a gradient leaf (builder style).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// Accumulated gradient, if a backward pass has filled it.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Option<Vec<T>>) {
        if let Some(ref v) = g {
            assert_eq!(v.len(), self.data.len(), "grad length must match data length");
        }
        self.grad = g;
    }

    /// Elementwise map into a new tensor (grad slot not carried over).
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Cast to another scalar type through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Fill from a deterministic RNG in row-major order.
pub fn random_uniform<T: Scalar>(shape: Shape, lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor<T> {
    let data = (0..shape.numel()).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor { shape, data, requires_grad: false, grad: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let s = Shape::new(1, 2, 2, 2);
        assert!(Tensor::<f32>::from_vec(s, vec![0.0; 8]).is_ok());
        assert!(Tensor::<f32>::from_vec(s, vec![0.0; 7]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let s = Shape::new(1, 2, 2, 3);
        let t = Tensor::<f64>::from_vec(s, (0..12).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(0, 1, 1, 2), 11.0);
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let s = Shape::new(1, 1, 2, 2);
        let t = Tensor::<f32>::from_vec(s, vec![0.1, -2.5, 3.0, 0.0]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast::<f32>();
        assert_eq!(t.data(), back.data());
    }
}
