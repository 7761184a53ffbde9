//! The operation set the model is written against.
//!
//! Model code is generic over [`Backend`] so one description of the network
//! runs either eagerly (inference, benchmarks, diagnostics) or on the
//! recording [`Graph`](super::Graph) (training, gradient checks).

use std::sync::Arc;

use super::tensor::{self, Tensor};
use crate::error::Result;

pub trait Backend {
    type Var: Clone;

    /// A value that never receives a gradient (data, fixed constants).
    fn constant(&mut self, t: Tensor) -> Self::Var;
    /// A value whose gradient is wanted.
    fn param(&mut self, t: Tensor) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn outer(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn phase(&mut self, re: &Self::Var, im: &Self::Var) -> Result<Self::Var>;

    fn sigmoid(&mut self, a: &Self::Var) -> Self::Var;
    fn relu(&mut self, a: &Self::Var) -> Self::Var;
    fn sqrt_eps(&mut self, a: &Self::Var) -> Result<Self::Var>;
    fn square(&mut self, a: &Self::Var) -> Self::Var;
    fn cos(&mut self, a: &Self::Var) -> Self::Var;
    fn sin(&mut self, a: &Self::Var) -> Self::Var;
    fn scale(&mut self, a: &Self::Var, c: f64) -> Self::Var;

    fn reduce_sum(&mut self, a: &Self::Var, axis: usize) -> Result<Self::Var>;
    fn sum_all(&mut self, a: &Self::Var) -> Self::Var;
    /// Row `i` of a rank-2 value, as a rank-1 value.
    fn row(&mut self, a: &Self::Var, i: usize) -> Result<Self::Var>;
    fn gather(&mut self, a: &Self::Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Self::Var>;
    fn concat(&mut self, parts: &[Self::Var], shape: &[usize]) -> Result<Self::Var>;
    fn reshape(&mut self, a: &Self::Var, shape: &[usize]) -> Result<Self::Var>;
    fn conv1d(&mut self, x: &Self::Var, kernel: &Self::Var) -> Result<Self::Var>;
}

/// Direct evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type Var = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul(a, b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add(a, b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::mul(a, b)
    }
    fn outer(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::outer(a, b)
    }
    fn phase(&mut self, re: &Tensor, im: &Tensor) -> Result<Tensor> {
        tensor::phase(re, im)
    }
    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        tensor::sigmoid(a)
    }
    fn relu(&mut self, a: &Tensor) -> Tensor {
        tensor::relu(a)
    }
    fn sqrt_eps(&mut self, a: &Tensor) -> Result<Tensor> {
        tensor::sqrt_eps(a)
    }
    fn square(&mut self, a: &Tensor) -> Tensor {
        tensor::square(a)
    }
    fn cos(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::cos)
    }
    fn sin(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::sin)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        tensor::scale(a, c)
    }
    fn reduce_sum(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        tensor::reduce_sum(a, axis)
    }
    fn sum_all(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }
    fn row(&mut self, a: &Tensor, i: usize) -> Result<Tensor> {
        row_of(a, i)
    }
    fn gather(&mut self, a: &Tensor, index: Arc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        tensor::gather(a, &index, shape)
    }
    fn concat(&mut self, parts: &[Tensor], shape: &[usize]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tensor::concat(&refs, shape)
    }
    fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        a.reshape(shape)
    }
    fn conv1d(&mut self, x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        tensor::conv1d(x, kernel)
    }
}

pub(crate) fn row_of(a: &Tensor, i: usize) -> Result<Tensor> {
    match a.shape() {
        [r, c] if i < *r => Ok(Tensor::vector(a.data()[i * c..(i + 1) * c].to_vec())),
        s => Err(crate::error::Error::Dimension(format!(
            "row {i} of shape {s:?}"
        ))),
    }
}
