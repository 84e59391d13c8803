//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Parameters and inputs live in [`Tensor`] values. A forward pass registers
//! them on a [`Tape`], which records every operation together with its
//! backward rule. [`Tape::backward`] replays the rules in reverse recording
//! order and returns per-leaf gradients that are then accumulated into the
//! owning tensors' `grad` buffers.
//!
//! Everything is generic over the element type so the same code runs in
//! 32-bit (training) and 64-bit (gradient checking).

mod adam;
pub mod exact;
pub mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};

/// Scalar element type of a tensor.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = a·b` (or `c += a·b` when `accumulate`), row-major storage.
    ///
    /// `a` is `m×k` (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k`
    /// when `b_t`), `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn gemm_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($ty:ty, $gemm:path) => {
        impl Real for $ty {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: output length");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.fill(0.0);
                    }
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_t);
                let (rsb, csb) = gemm_strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: lengths were checked above and the strides describe
                // exactly the m×k, k×n and m×n row-major layouts.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a rank-0 loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable was not recorded on this tape (or the tape was cleared)")]
    ForeignVar,
    #[error("parameter has no gradient buffer")]
    MissingGrad,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Identity shared by a parameter and every tape leaf registered from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor. Rank 0 (empty shape) holds a single scalar.
///
/// Cloning keeps the [`TensorId`], so a clone is a snapshot of the same
/// logical parameter.
#[derive(Clone, Debug)]
pub struct Tensor<T: Real> {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    partials: Vec<Vec<f64>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        let expected = numel(shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
            partials: Vec::new(),
        })
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![T::zero(); numel(shape)])
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[], vec![value]).expect("rank-0 tensor")
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Mutable view of the values; copies on write if a tape still shares them.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Resets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.fill(T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
        self.partials.iter_mut().for_each(Vec::clear);
    }

    /// Adds a same-shaped contribution to the gradient buffer. The buffer
    /// holds the correctly rounded sum of everything accumulated since the
    /// last reset, so the order of contributions does not matter.
    pub fn accumulate_grad(&mut self, contribution: &[T]) -> Result<()> {
        if contribution.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape.clone(),
                expected: self.data.len(),
                actual: contribution.len(),
            });
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); contribution.len()]);
        if self.partials.len() != grad.len() {
            self.partials = grad.iter().map(|g| vec![g.as_f64()]).collect();
        }
        for ((g, p), &c) in grad.iter_mut().zip(&mut self.partials).zip(contribution) {
            exact::push(p, c.as_f64());
            *g = T::lit(exact::round(p));
        }
        Ok(())
    }

    /// Squared L2 norm of the values, in f64.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// 64-bit FNV-1a over shape and raw value bits; equal iff bit-identical
    /// (up to hash collisions).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for &d in &self.shape {
            h.write(&(d as u64).to_le_bytes());
        }
        for v in self.data.iter() {
            h.write(&v.as_f64().to_bits().to_le_bytes());
        }
        h.0
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Combined fingerprint of a parameter list.
pub fn fingerprint_all<'a, T: Real>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> u64 {
    let mut h = Fnv::default();
    for p in params {
        h.write(&p.fingerprint().to_le_bytes());
    }
    h.0
}

pub fn zero_grads<'a, T: Real>(params: impl IntoIterator<Item = &'a mut Tensor<T>>) {
    for p in params {
        p.zero_grad();
    }
}
