//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Tensors are row-major `Vec<F>` buffers with dynamic shape (rank 0..=2 in
//! practice). The companion [`Graph`] records every operation applied to a
//! [`Var`] so gradients can be taken by walking the record backwards. The
//! backward pass itself is expressed with the same primitive operations,
//! which is what makes gradients of gradients possible: see [`Var::grad`]
//! with `create_graph = true`.
//!
//! All arithmetic is element-order deterministic (plain sequential loops, no
//! threading, no hash-order iteration), so identical inputs produce
//! bitwise-identical outputs within a build.

mod fd;
mod graph;

pub use fd::{
    abs_err_norm, directional_kink_score, finite_diff_grad, rel_err_norm,
    DEFAULT_FD_STEP,
};
pub use graph::{Graph, Var};

use std::fmt;

use thiserror::Error;

/// Element type of a tensor, as stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Stable one-byte code used by the checkpoint container.
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element trait: `f32` for training speed, `f64` for
/// verification work (gradient checking runs at `f64` only).
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn into_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("gradient output must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("wrt node #{index} is not reachable from the differentiated output")]
    UnreachableWrt { index: usize },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
}

/// Row-major dense tensor. Rank 0 is a scalar (`shape == []`, one element).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn scalar(x: F) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::one(); numel] }
    }

    pub fn full(shape: &[usize], x: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![x; numel] }
    }

    /// Standard-normal draws in row-major order (sampled at `f64`, then
    /// narrowed, so the draw sequence is precision-independent).
    pub fn randn<R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let x: f64 = rng.sample(rand_distr::StandardNormal);
                F::from_f64(x)
            })
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Uniform draws in `[lo, hi)`, row-major order, sampled at `f64`.
    pub fn rand_uniform<R: rand::Rng + ?Sized>(
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn from_f64_slice(shape: &[usize], xs: &[f64]) -> Self {
        let data = xs.iter().map(|&x| F::from_f64(x)).collect::<Vec<F>>();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows of a rank-1/2 tensor (rank-1 tensors count elements).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 | 2 => self.shape[0],
            r => panic!("rows() on rank-{r} tensor"),
        }
    }

    /// Elements per row: 1 for rank-1, trailing dimension for rank-2.
    pub fn row_len(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[1],
            r => panic!("row_len() on rank-{r} tensor"),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> F {
        assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.into_f64()).collect(),
        }
    }

    /// Squared Frobenius norm, accumulated at f64.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|x| {
            let v = x.into_f64();
            v * v
        }).sum()
    }
}

/// How two shapes line up for an elementwise binary op.
///
/// Supported forms: identical shapes, a rank-0 scalar against anything, and
/// broadcasting over the leading axis (the smaller operand's shape equals the
/// larger one's shape with the first axis removed, e.g. `[D]` against
/// `[B, D]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BcPlan {
    Same,
    /// Lhs is rank-0.
    ScalarLhs,
    /// Rhs is rank-0.
    ScalarRhs,
    /// Lhs is the smaller operand, repeated along rhs's leading axis.
    LeadingLhs,
    /// Rhs is the smaller operand, repeated along lhs's leading axis.
    LeadingRhs,
}

pub(crate) fn broadcast_plan(lhs: &[usize], rhs: &[usize]) -> Option<(Vec<usize>, BcPlan)> {
    if lhs == rhs {
        return Some((lhs.to_vec(), BcPlan::Same));
    }
    if lhs.is_empty() {
        return Some((rhs.to_vec(), BcPlan::ScalarLhs));
    }
    if rhs.is_empty() {
        return Some((lhs.to_vec(), BcPlan::ScalarRhs));
    }
    if rhs.len() + 1 == lhs.len() && rhs == &lhs[1..] {
        return Some((lhs.to_vec(), BcPlan::LeadingRhs));
    }
    if lhs.len() + 1 == rhs.len() && lhs == &rhs[1..] {
        return Some((rhs.to_vec(), BcPlan::LeadingLhs));
    }
    None
}

/// Apply `f` elementwise under the broadcast plan. Panics with the op name on
/// incompatible shapes; shape checks happen here for every binary op.
pub(crate) fn bc_zip<F: Scalar>(
    op: &str,
    lhs: &Tensor<F>,
    rhs: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Tensor<F> {
    let (out_shape, plan) = broadcast_plan(lhs.shape(), rhs.shape()).unwrap_or_else(|| {
        panic!(
            "{op}: incompatible shapes {:?} and {:?} (need equal, scalar, or leading-axis broadcast)",
            lhs.shape(),
            rhs.shape()
        )
    });
    let data = match plan {
        BcPlan::Same => lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| f(a, b))
            .collect(),
        BcPlan::ScalarLhs => {
            let a = lhs.data()[0];
            rhs.data().iter().map(|&b| f(a, b)).collect()
        }
        BcPlan::ScalarRhs => {
            let b = rhs.data()[0];
            lhs.data().iter().map(|&a| f(a, b)).collect()
        }
        BcPlan::LeadingRhs => {
            let inner = rhs.numel();
            lhs.data()
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, rhs.data()[i % inner]))
                .collect()
        }
        BcPlan::LeadingLhs => {
            let inner = lhs.numel();
            rhs.data()
                .iter()
                .enumerate()
                .map(|(i, &b)| f(lhs.data()[i % inner], b))
                .collect()
        }
    };
    Tensor::new(out_shape, data)
}
