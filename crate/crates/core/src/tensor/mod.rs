//! Dense row-major tensors with a tape-based reverse-mode graph.
//!
//! Values are generic over [`Real`] so the same network code runs in
//! `f32` for training and `f64` for finite-difference verification.

mod dump;
mod gradcheck;
mod graph;
pub mod kernels;
mod param;

pub use dump::{read_tensor, write_tensor, TENSOR_MAGIC};
pub(crate) use dump::read_u32;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamId, ParamSet, Parameter};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{self, Result};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width of one element in the dump format.
    const BYTES: usize;
    const NAME: &'static str;
    /// Accumulate dense kernels with error compensation. Set for the
    /// verification precision, where finite differences need a low floor.
    const COMPENSATED: bool;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";
    const COMPENSATED: bool = false;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";
    const COMPENSATED: bool = true;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err_dims(&shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(error::shape(format!(
                "shape {:?} needs {n} elements, got {}",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<F> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, new_shape: &[usize]) -> Result<Self> {
        let n: usize = new_shape.iter().product();
        if n != self.data.len() || new_shape.contains(&0) {
            return Err(error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, new_shape
            )));
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> F {
        compensated_sum(self.data.iter().copied())
    }

    pub fn sum_squares(&self) -> F {
        compensated_sum(self.data.iter().map(|&v| v * v))
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    /// `[B, C, H, W]` view of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            other => Err(error::shape(format!("expected a rank-4 tensor, got {other:?}"))),
        }
    }
}

fn shape_err_dims(dims: &[usize]) -> crate::error::Error {
    error::shape(format!("shape {dims:?} must be non-empty with dims >= 1"))
}

/// Neumaier-compensated summation. Scalar reductions feed the loss, and
/// finite-difference checks resolve changes a few ulp above its rounding.
pub fn compensated_sum<F: Real>(values: impl Iterator<Item = F>) -> F {
    let mut sum = F::zero();
    let mut comp = F::zero();
    for v in values {
        neumaier_add(&mut sum, &mut comp, v);
    }
    sum + comp
}

/// One Neumaier step: `sum += v`, with the lost low part added to `comp`.
#[inline]
pub(crate) fn neumaier_add<F: Real>(sum: &mut F, comp: &mut F, v: F) {
    let t = *sum + v;
    if sum.abs() >= v.abs() {
        *comp += (*sum - t) + v;
    } else {
        *comp += (v - t) + *sum;
    }
    *sum = t;
}
