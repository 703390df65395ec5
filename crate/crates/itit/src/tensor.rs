//! Plain dense tensors: shape plus row-major data behind an `Arc`.
//!
//! `Tensor` is the value type used for parameters, datasets and forward-only
//! math. Differentiable computation wraps tensors into tape variables (see
//! [`crate::tape`]); the `Arc` makes that wrap free and guarantees that a
//! recorded tape never observes in-place mutation — mutating a shared tensor
//! copies on write.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor: shape {:?} wants {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![S::zero(); n]) }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![v; n]) }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: Arc::new((0..n).map(&mut f).collect()) }
    }

    /// Truncated normal init: std `std`, resampled outside two standard
    /// deviations. Draws are made in f64 so f32/f64 models share streams.
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0f64, std).expect("std must be positive");
        Self::from_fn(shape, |_| {
            loop {
                let x = dist.sample(rng);
                if x.abs() <= 2.0 * std {
                    return S::from_f64(x);
                }
            }
        })
    }

    /// Uniform draws in [lo, hi), in f64 for stream stability.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        Self::from_fn(shape, |_| S::from_f64(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    /// Mutable view; copies if the buffer is shared with a tape or clone.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn at2(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }
}

impl<S: Scalar> PartialEq for Tensor<S> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
