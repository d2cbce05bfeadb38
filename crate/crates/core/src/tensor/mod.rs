//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a flat scalar buffer. Element `(i0, .., ik)`
//! lives at `sum(ij * stride_j)` where the last axis has stride 1. Image data
//! uses channel-major `(C, H, W)` order, with an optional leading batch axis.

mod gemm;
mod kernels;

pub(crate) use gemm::gemm;
pub(crate) use kernels::{conv_from_cols, conv_geometry};
pub use kernels::{
    col2im, conv2d_valid, im2col, log_softmax_rows, matmul, maxpool2x2, relu, softmax, MaxPoolOutput,
};

use crate::error::{Error, Result};

/// Scalar type used for every tensor. Double precision unless the `f32`
/// feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Width in bytes of [`Scalar`], recorded in serialized containers.
pub const SCALAR_BYTES: u8 = std::mem::size_of::<Scalar>() as u8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Scalar>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without validating; callers guarantee `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Scalar>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<Scalar>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Scalar) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.shape[k + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .zip(self.strides())
            .map(|((&i, &d), s)| {
                assert!(i < d, "index {i} out of bounds for dimension {d}");
                i * s
            })
            .sum()
    }

    pub fn at(&self, index: &[usize]) -> Scalar {
        self.data[self.offset(index)]
    }

    /// Reinterprets the flat buffer under a new shape. The buffer is never reordered.
    pub fn reshape(self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.data.len() || new_shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {new_shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, value: Scalar) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// Number of rows when viewed as `[shape[0], rest]`.
    pub fn leading(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Slice of the `i`-th entry along the leading axis.
    pub fn row(&self, i: usize) -> &[Scalar] {
        let width = self.data.len() / self.leading();
        &self.data[i * width..(i + 1) * width]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest element; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest value in `xs`; the lowest index wins ties.
pub fn argmax(xs: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Height and width of a single image plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape2D {
    pub height: usize,
    pub width: usize,
}

impl Shape2D {
    pub fn new(height: usize, width: usize) -> Self {
        Shape2D { height, width }
    }

    /// The `sqrt(n) x sqrt(n)` plane for a signal of length `n`.
    pub fn square(n: usize) -> Result<Self> {
        let side = (n as f64).sqrt().round() as usize;
        if side == 0 || side * side != n {
            return Err(Error::shape(format!(
                "signal length {n} is not a perfect square"
            )));
        }
        Ok(Shape2D::new(side, side))
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffer() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.offset(&[1, 2, 3]), 23);
    }

    #[test]
    fn channel_major_flatten_order() {
        let t = Tensor::from_fn(&[16, 4, 4], |i| i as Scalar);
        let flat = t.clone().reshape(&[256]).unwrap();
        for c in 0..16 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(flat.data()[c * 16 + i * 4 + j], t.at(&[c, i, j]));
                }
            }
        }
    }

    #[test]
    fn reshape_round_trip() {
        let t = Tensor::from_fn(&[784], |i| (i as Scalar).sin());
        let img = t.clone().reshape(&[28, 28]).unwrap();
        assert_eq!(img.shape(), &[28, 28]);
        assert_eq!(img.reshape(&[784]).unwrap(), t);
    }

    #[test]
    fn reshape_count_mismatch() {
        let t = Tensor::zeros(&[10]);
        assert!(matches!(t.reshape(&[3, 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn square_planes() {
        assert_eq!(Shape2D::square(784).unwrap(), Shape2D::new(28, 28));
        assert!(Shape2D::square(783).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 10]), 0);
    }
}
