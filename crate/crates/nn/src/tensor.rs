//! Dense f64 tensors with explicit shapes.
//!
//! Convolutional data uses layout `[C, D, H, W]` (W fastest); matrices are
//! `[rows, cols]` row-major. Site matrices flatten a latent grid in i-fastest
//! order: `site = i + h*(j + w*k)`.

use crate::error::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, NnError> {
        Tensor::new(shape, self.data.clone())
    }

    /// Elementwise in-place accumulation; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Conv-layout helpers for `[C, D, H, W]` tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn of(t: &Tensor) -> Result<Self, NnError> {
        match *t.shape() {
            [c, d, h, w] => Ok(GridShape { c, d, h, w }),
            _ => Err(NnError::shape(format!(
                "expected [C,D,H,W] tensor, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.d + d) * self.h + h) * self.w + w
    }

    pub fn to_vec(&self) -> Vec<usize> {
        vec![self.c, self.d, self.h, self.w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grid_index_w_fastest() {
        let g = GridShape { c: 2, d: 3, h: 4, w: 5 };
        assert_eq!(g.index(0, 0, 0, 1), 1);
        assert_eq!(g.index(0, 0, 1, 0), 5);
        assert_eq!(g.index(0, 1, 0, 0), 20);
        assert_eq!(g.index(1, 0, 0, 0), 60);
    }
}
