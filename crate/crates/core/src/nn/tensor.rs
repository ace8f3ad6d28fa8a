//! Dense NCHW tensors generic over the float width.
//!
//! Kernels run in `f32` for training and in `f64` when certifying gradients
//! against finite differences; [`Scalar`] is the common bound.

use num_traits::Float;

/// Float scalar usable in every kernel. Implemented for `f32` and `f64`.
pub trait Scalar: Float + std::fmt::Debug + Default + Send + Sync + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lossless-enough conversion from f64 literals into the working scalar.
#[inline]
pub fn s<T: Scalar>(x: f64) -> T {
    T::from(x).expect("f64 -> scalar")
}

/// 4-D row-major tensor, shape ordered `(n, c, h, w)`.
///
/// The gradient buffer is allocated lazily; parameters carry one, activations
/// usually do not.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    pub(crate) data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
            grad: None,
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    /// Gradient buffer, allocated to zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Accumulate `delta` into the gradient buffer.
    pub fn add_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(delta.iter()) {
            *gi = *gi + *di;
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Convert the value buffer to another float width; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::from(v).expect("float cast"))
    }
}
