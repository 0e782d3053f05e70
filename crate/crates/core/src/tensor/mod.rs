//! Minimal dense real-array engine with reverse-mode differentiation.
//!
//! Everything above this module (attention, halting, the full models) is a
//! composition of [`Graph`] ops over [`Tensor`] values. The engine is strictly
//! two-dimensional: vectors are `[1 x d]` rows, scalars are `[1 x 1]`.

mod check;
mod graph;
mod rng;
mod scalar;

pub use check::{grad_check, grad_check_store};
pub use graph::{AttnMask, Graph, RopeId, RopeTable, Var};
pub use rng::{fnv1a, splitmix64, RngStream};
pub use scalar::Scalar;

use crate::error::TensorError;

/// Shape-tagged real array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert!(
            shape.iter().all(|&e| e > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![T::ZERO; n])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(vec![1, 1], vec![v])
    }

    pub fn row(data: Vec<T>) -> Self {
        Tensor::new(vec![1, data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) view of the shape; rank-1 tensors are single rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("graph ops are 2-D; got shape {:?}", self.shape),
        }
    }

    pub fn validate_finite(&self) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NumericFault("tensor"))
        }
    }

    pub fn map_to_f64(&self) -> Tensor<f64> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| v.to_f64()).collect(),
        )
    }
}

impl Tensor<f64> {
    pub fn map_to<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }
}

/// Numerically safe softmax over one vector: entries positive, sum 1,
/// invariant to adding a constant to every entry.
pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    assert!(!v.is_empty(), "softmax of an empty vector is a contract violation");
    let mut m = v[0];
    for &x in &v[1..] {
        m = m.max(x);
    }
    let mut out: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: T = out.iter().copied().sum();
    for o in &mut out {
        *o = *o / z;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0f64, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariance_and_uniform() {
        for c in [-3.0f64, 0.0, 17.5] {
            let p = softmax(&[c, c, c, c]);
            for v in p {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_hand_oracle() {
        // exp(ln 1) = 1, exp(ln 3) = 3 => [1/4, 3/4]
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_for_large_inputs() {
        let p = softmax(&[50.0f64, -50.0, 12.0, 0.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn softmax_empty_panics() {
        let _ = softmax::<f64>(&[]);
    }

    #[test]
    #[should_panic(expected = "does not match")]
    fn tensor_shape_mismatch_panics() {
        let _ = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0]);
    }
}
