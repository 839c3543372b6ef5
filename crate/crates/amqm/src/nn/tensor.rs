//! Dense row-major tensor of f64 values.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::Image;

/// Dense tensor. Shape dimensions are positive; data is stored row-major
/// (last dimension fastest) and kept finite at construction boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if data.len() != count {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {count} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("tensor values must be finite"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let count: usize = shape.iter().product();
        assert!(!shape.is_empty() && count > 0, "bad tensor shape {shape:?}");
        Tensor {
            shape,
            data: vec![0.0; count],
        }
    }

    /// 1xHxW tensor from a grayscale image.
    pub fn from_image(image: &Image) -> Tensor {
        Tensor {
            shape: vec![1, image.height(), image.width()],
            data: image.pixels().to_vec(),
        }
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

    /// Reinterprets the buffer under a new shape with the same element
    /// count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// Stacks same-shaped item tensors into one batch tensor with a leading
/// batch dimension.
pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::shape("cannot stack an empty batch"))?;
    let mut data = Vec::with_capacity(items.len() * first.len());
    for item in items {
        if item.shape() != first.shape() {
            return Err(Error::shape(format!(
                "batch items disagree on shape: {:?} vs {:?}",
                first.shape(),
                item.shape()
            )));
        }
        data.extend_from_slice(item.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn from_image_is_row_major() {
        let img = Image::new(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let t = Tensor::from_image(&img);
        assert_eq!(t.shape(), &[1, 3, 2]);
        assert_eq!(t.data()[2], img.get(0, 1));
    }

    #[test]
    fn stacking_concatenates_in_order() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let s = stack_batch(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(stack_batch(&[a, Tensor::zeros(vec![1, 3])]).is_err());
        assert!(stack_batch(&[]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshaped(vec![4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![3]).is_err());
    }
}
