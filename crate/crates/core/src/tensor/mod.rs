//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is an immutable value (its buffer sits behind an `Arc`, so
//! clones are cheap and it can be shared across threads). Differentiable
//! computation happens on a [`Graph`], which records the primitive
//! operations applied to [`Var`] handles and replays their adjoints in
//! reverse on [`Graph::backward`].
//!
//! Everything is generic over [`Real`] so the same layer code runs in 32-bit
//! for training and in 64-bit when verifying gradients.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use gradcheck::{finite_difference_check, FdOptions, FdReport};
pub use graph::{Graph, Mode, Var};

/// Scalar types the tensor core can compute in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// Bit width of the format, used only for reporting.
    const BITS: u32;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any float")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// Raw bit pattern widened to 64 bits; used for determinism checks.
    fn bits(self) -> u64;

    /// `c += a·b` for an `m×k` by `k×n` product with element strides
    /// `(row, col)` for each operand.
    #[doc(hidden)]
    fn gemm(dims: (usize, usize, usize), a: (&[Self], isize, isize), b: (&[Self], isize, isize), c: (&mut [Self], isize, isize));
}

/// Checks that a strided `rows×cols` view stays inside `len` elements.
fn view_fits(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) -> bool {
    rs >= 0 && cs >= 0 && (rows - 1) * (rs as usize) + (cols - 1) * (cs as usize) < len
}

macro_rules! impl_gemm {
    ($name:ident) => {
        fn gemm(
            (m, k, n): (usize, usize, usize),
            (a, rsa, csa): (&[Self], isize, isize),
            (b, rsb, csb): (&[Self], isize, isize),
            (c, rsc, csc): (&mut [Self], isize, isize),
        ) {
            if m == 0 || k == 0 || n == 0 {
                return;
            }
            assert!(
                view_fits(a.len(), m, k, rsa, csa)
                    && view_fits(b.len(), k, n, rsb, csb)
                    && view_fits(c.len(), m, n, rsc, csc),
                "gemm operand views exceed their buffers"
            );
            // SAFETY: every view was checked to lie within its slice, and
            // `c` is uniquely borrowed.
            unsafe {
                matrixmultiply::$name(
                    m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), rsc, csc,
                );
            }
        }
    };
}

impl Real for f32 {
    const BITS: u32 = 32;
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
    impl_gemm!(sgemm);
}

impl Real for f64 {
    const BITS: u32 = 64;
    fn bits(self) -> u64 {
        self.to_bits()
    }
    impl_gemm!(dgemm);
}

/// Dense n-dimensional array in row-major order.
///
/// A rank-0 tensor (empty shape) holds a single scalar. Every dimension of a
/// non-scalar tensor is positive.
#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: F) -> Self {
        Self::from_parts(Vec::new(), vec![v])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![v; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = F::one();
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::from_parts(shape, (0..n).map(&mut f).collect())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| F::of(rng.gen_range(lo..hi)))
    }

    /// Normal samples with the given standard deviation.
    pub fn normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        })
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.as_ref().clone()
    }

    /// Consumes the tensor, returning its buffer (copying only if shared).
    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Result<F> {
        if index.len() != self.rank() {
            return Err(Error::Shape {
                op: "get",
                lhs: self.shape.clone(),
                rhs: index.to_vec(),
            });
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::Index {
                    what: "tensor index",
                    index: i,
                    bound: d,
                });
            }
            off = off * d + i;
        }
        Ok(self.data[off])
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[F] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| G::of(x.f64())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max)
    }

    /// True when both tensors have the same shape and identical bit patterns.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Matrix product of two rank-2 tensors, outside any graph.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = kernels::matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 16;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffers() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(Tensor::<f32>::scalar(2.0).rank(), 0);
    }

    #[test]
    fn reshape_shares_buffer() {
        let t = Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32);
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.get(&[2, 1]).unwrap(), 5.0);
        assert!(t.reshape(vec![4]).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::<f32>::from_fn(vec![3], |i| i as f32 * 0.25);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert!(t.bit_eq(&back));
    }
}
