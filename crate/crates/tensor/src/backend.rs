use std::sync::Arc;

use rand::Rng;

use crate::array::{Array, Scalar};
use crate::error::Result;
use crate::kernels;

/// The operation set shared by gradient-recording and eager execution.
///
/// Model code is written once against this trait: training runs it on a
/// [`Tape`](crate::Tape), inference on [`Eager`], whose indexed writes
/// mutate their input in place instead of copying it.
pub trait Backend {
    type Elem: Scalar;
    type Tensor: Clone;

    fn constant(&self, a: Array<Self::Elem>) -> Self::Tensor;
    /// A named learnable leaf.
    fn param(&self, name: &str, a: &Arc<Array<Self::Elem>>) -> Self::Tensor;
    fn value(&self, t: &Self::Tensor) -> Arc<Array<Self::Elem>>;
    fn shape(&self, t: &Self::Tensor) -> Vec<usize>;

    fn matmul(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor>;
    /// `a · bᵀ`.
    fn matmul_nt(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor>;
    fn add(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor>;
    fn sub(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor>;
    fn mul(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor>;
    fn add_bias(&self, a: &Self::Tensor, bias: &Self::Tensor) -> Result<Self::Tensor>;
    fn scale(&self, a: &Self::Tensor, c: f64) -> Result<Self::Tensor>;
    fn sigmoid(&self, a: &Self::Tensor) -> Result<Self::Tensor>;
    fn tanh(&self, a: &Self::Tensor) -> Result<Self::Tensor>;
    fn relu(&self, a: &Self::Tensor) -> Result<Self::Tensor>;
    fn softmax(&self, a: &Self::Tensor) -> Result<Self::Tensor>;
    fn log_softmax(&self, a: &Self::Tensor) -> Result<Self::Tensor>;
    fn logsumexp(&self, a: &Self::Tensor) -> Result<Self::Tensor>;
    fn dropout<R: Rng + ?Sized>(&self, a: &Self::Tensor, rate: f64, rng: &mut R) -> Result<Self::Tensor>;
    fn concat(&self, parts: &[Self::Tensor]) -> Result<Self::Tensor>;
    fn slice(&self, a: &Self::Tensor, start: usize, end: usize) -> Result<Self::Tensor>;
    fn reshape(&self, a: &Self::Tensor, shape: &[usize]) -> Result<Self::Tensor>;
    fn pad_rows(&self, a: &Self::Tensor, len: usize) -> Result<Self::Tensor>;
    fn select(&self, a: &Self::Tensor, rows: &[usize], cols: Option<&[usize]>) -> Result<Self::Tensor>;
    /// Functional indexed write; consumes `a` so eager execution can reuse
    /// its buffer.
    fn assign(
        &self,
        a: Self::Tensor,
        rows: &[usize],
        cols: Option<&[usize]>,
        v: &Self::Tensor,
    ) -> Result<Self::Tensor>;
    fn sum(&self, a: &Self::Tensor) -> Result<Self::Tensor>;
}

/// Immediate execution without gradient bookkeeping.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager<T>(std::marker::PhantomData<T>);

impl<T: Scalar> Eager<T> {
    pub fn new() -> Self {
        Self(std::marker::PhantomData)
    }
}

impl<T: Scalar> Backend for Eager<T> {
    type Elem = T;
    type Tensor = Arc<Array<T>>;

    fn constant(&self, a: Array<T>) -> Self::Tensor {
        Arc::new(a)
    }

    fn param(&self, _name: &str, a: &Arc<Array<T>>) -> Self::Tensor {
        Arc::clone(a)
    }

    fn value(&self, t: &Self::Tensor) -> Arc<Array<T>> {
        Arc::clone(t)
    }

    fn shape(&self, t: &Self::Tensor) -> Vec<usize> {
        t.shape().to_vec()
    }

    fn matmul(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor> {
        kernels::gemm(a, false, b, false).map(Arc::new)
    }

    fn matmul_nt(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor> {
        kernels::gemm(a, false, b, true).map(Arc::new)
    }

    fn add(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor> {
        kernels::add(a, b).map(Arc::new)
    }

    fn sub(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor> {
        kernels::sub(a, b).map(Arc::new)
    }

    fn mul(&self, a: &Self::Tensor, b: &Self::Tensor) -> Result<Self::Tensor> {
        kernels::mul(a, b).map(Arc::new)
    }

    fn add_bias(&self, a: &Self::Tensor, bias: &Self::Tensor) -> Result<Self::Tensor> {
        kernels::add_bias(a, bias).map(Arc::new)
    }

    fn scale(&self, a: &Self::Tensor, c: f64) -> Result<Self::Tensor> {
        Ok(Arc::new(kernels::scale(a, c)))
    }

    fn sigmoid(&self, a: &Self::Tensor) -> Result<Self::Tensor> {
        Ok(Arc::new(kernels::sigmoid(a)))
    }

    fn tanh(&self, a: &Self::Tensor) -> Result<Self::Tensor> {
        Ok(Arc::new(kernels::tanh(a)))
    }

    fn relu(&self, a: &Self::Tensor) -> Result<Self::Tensor> {
        Ok(Arc::new(kernels::relu(a)))
    }

    fn softmax(&self, a: &Self::Tensor) -> Result<Self::Tensor> {
        kernels::softmax(a).map(Arc::new)
    }

    fn log_softmax(&self, a: &Self::Tensor) -> Result<Self::Tensor> {
        kernels::log_softmax(a).map(Arc::new)
    }

    fn logsumexp(&self, a: &Self::Tensor) -> Result<Self::Tensor> {
        kernels::logsumexp(a).map(Arc::new)
    }

    fn dropout<R: Rng + ?Sized>(&self, a: &Self::Tensor, rate: f64, rng: &mut R) -> Result<Self::Tensor> {
        let mask = kernels::dropout_mask::<T, R>(a.shape(), rate, rng)?;
        kernels::mul(a, &mask).map(Arc::new)
    }

    fn concat(&self, parts: &[Self::Tensor]) -> Result<Self::Tensor> {
        let refs: Vec<&Array<T>> = parts.iter().map(|p| p.as_ref()).collect();
        kernels::concat_last(&refs).map(Arc::new)
    }

    fn slice(&self, a: &Self::Tensor, start: usize, end: usize) -> Result<Self::Tensor> {
        kernels::slice_last(a, start, end).map(Arc::new)
    }

    fn reshape(&self, a: &Self::Tensor, shape: &[usize]) -> Result<Self::Tensor> {
        (**a).clone().reshaped(shape).map(Arc::new)
    }

    fn pad_rows(&self, a: &Self::Tensor, len: usize) -> Result<Self::Tensor> {
        kernels::pad_rows(a, len).map(Arc::new)
    }

    fn select(&self, a: &Self::Tensor, rows: &[usize], cols: Option<&[usize]>) -> Result<Self::Tensor> {
        kernels::select(a, rows, cols).map(Arc::new)
    }

    fn assign(
        &self,
        mut a: Self::Tensor,
        rows: &[usize],
        cols: Option<&[usize]>,
        v: &Self::Tensor,
    ) -> Result<Self::Tensor> {
        kernels::assign_in_place(Arc::make_mut(&mut a), rows, cols, v)?;
        Ok(a)
    }

    fn sum(&self, a: &Self::Tensor) -> Result<Self::Tensor> {
        Ok(Arc::new(kernels::sum(a)))
    }
}
