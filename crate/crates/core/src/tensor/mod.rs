//! Dense row-major tensors and the handful of differentiable layers the
//! decoding networks are built from.
//!
//! There is no general autograd tape. Each layer caches what its backward
//! pass needs during `forward`, and `backward` returns the gradient with
//! respect to the layer input while accumulating parameter gradients into
//! the parameters' `grad` slots.

mod conv;
mod dense;
pub(crate) mod gradcheck;
mod norm;
mod pool;
mod scalar;

pub use conv::{conv2d, conv2d_backward, Conv2d, Conv2dGrads};
pub use dense::{
    cross_entropy, linear, linear_backward, relu, relu_backward, softmax,
    softmax_cross_entropy_grad, Linear, LinearGrads, Relu, PROB_FLOOR,
};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use norm::{batchnorm2d, batchnorm2d_backward, BatchNorm2d, BatchNormCache, BnMode, RunningStats};
pub use pool::{maxpool2d, maxpool2d_backward, MaxPool2d, PoolIndices};
pub use scalar::Scalar;

pub(crate) use conv::{conv_backward_sample, conv_forward_sample, ConvDims};
pub(crate) use scalar::{lane_sq_dev, lane_sum};

use crate::error::{Error, Result};

/// Dense n-dimensional array with an optional same-shape gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Split borrow of values and (allocated) gradient.
    pub fn data_and_grad_mut(&mut self) -> (&mut [T], &mut [T]) {
        let n = self.data.len();
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        (&mut self.data, grad)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Converts element type, dropping any gradient.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Error naming the first non-finite element, if any.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        check_finite(&self.data, context)
    }
}

pub(crate) fn check_finite<T: Scalar>(values: &[T], context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
            value: values[index].as_f64(),
        }),
    }
}

/// Interprets a 3-d `[C,H,W]` or 4-d `[B,C,H,W]` shape as batched.
pub(crate) fn as_batched(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [c, h, w] => Ok([1, c, h, w]),
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(format!(
            "{what} expects [C,H,W] or [B,C,H,W], got {shape:?}"
        ))),
    }
}

/// Output shape in the same rank as the input shape.
pub(crate) fn like_input(input_rank: usize, bchw: [usize; 4]) -> Vec<usize> {
    if input_rank == 3 {
        bchw[1..].to_vec()
    } else {
        bchw.to_vec()
    }
}

/// A layer with a cached forward pass and a matching reverse-mode backward pass.
pub trait Differentiable<T: Scalar> {
    /// Forward pass; caches whatever `backward` needs.
    fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>>;

    /// Returns d(objective)/d(input) and accumulates parameter gradients.
    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>>;

    fn parameters(&self) -> Vec<&Tensor<T>> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }
}
