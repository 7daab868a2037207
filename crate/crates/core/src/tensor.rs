//! Dense row-major tensors and the scalar trait the engine is generic over.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type usable by the engine. Search and evaluation run in `f32`;
/// gradient checks run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// `c = a * b (+ c when accumulating)` for dense row-major matrices,
    /// `a` being `m x k` (or `k x m` when `a_t`) and `b` being `k x n` (or
    /// `n x k` when `b_t`).
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
}

#[allow(clippy::too_many_arguments)]
fn gemm_strides(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a_t: bool,
    b_len: usize,
    b_t: bool,
    c_len: usize,
) -> [isize; 4] {
    assert!(
        a_len >= m * k && b_len >= k * n && c_len >= m * n,
        "gemm operand too short"
    );
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    [rsa, csa, rsb, csb]
}

impl Real for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], accumulate: bool) {
        let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a.len(), a_t, b.len(), b_t, c.len());
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the strides address only elements inside the checked lengths.
        unsafe {
            matrixmultiply::sgemm(
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

impl Real for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
        let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a.len(), a_t, b.len(), b_t, c.len());
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the strides address only elements inside the checked lengths.
        unsafe {
            matrixmultiply::dgemm(
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

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense N-dimensional array with an optional gradient slot.
///
/// `grad` is `Some` exactly when the tensor requires a gradient, and then has
/// the same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![F::zero(); n])
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![v; n])
    }

    pub fn scalar(v: F) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![F::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [F]> {
        self.grad.as_deref_mut()
    }

    /// Splits into the data and gradient buffers so an optimizer can update
    /// one while reading the other.
    pub fn data_and_grad_mut(&mut self) -> (&mut [F], Option<&mut [F]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    /// Adds `g` into the gradient slot. Panics if the tensor does not
    /// require a gradient.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        let grad = self
            .grad
            .as_mut()
            .expect("accumulate_grad on a tensor without a gradient slot");
        assert_eq!(grad.len(), g.len());
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        let mut t = Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        );
        if let Some(g) = &self.grad {
            t.grad = Some(g.iter().map(|v| G::of(v.as_f64())).collect());
        }
        t
    }
}
