//! Dense row-major tensors over `f32`/`f64` plus the GEMM hook the
//! convolution kernels are built on.
//!
//! Feature maps are `[C, H, W]`, convolution weights `[C_out, C_in, K, K]`,
//! linear weights `[Out, In]`, vectors `[N]` and scalars `[1]`. All gradient
//! tolerances in the test suites assume `f64`; training defaults to `f32`.

use crate::error::{Error, Result};

/// Element width tag stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point element type usable by the whole stack.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + num_traits::Float
    + num_traits::NumAssignOps
    + Default
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C := alpha * A @ B + beta * C` on raw row/column strides.
    ///
    /// # Safety
    /// Pointers must cover `m*k`, `k*n` and `m*n` elements under the given
    /// strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a `[1]` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Channel count of a `[C, H, W]` tensor.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape(format!(
                "expected rank-3 [C,H,W] tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Borrow one channel plane of a `[C, H, W]` tensor.
    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * *b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for a in self.data.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Lossy precision change (exact when widening or same width).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// `c[m,n] (+)= a[m,k] @ b[k,n]`, all row-major contiguous.
///
/// `beta = 0` overwrites `c`, `beta = 1` accumulates into it.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`gemm`] but consumes `a` transposed: `c[m,n] (+)= a^T @ b` where
/// `a` is stored `[k, m]` row-major.
pub fn gemm_at<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`gemm`] but consumes `b` transposed: `c[m,n] (+)= a @ b^T` where
/// `b` is stored `[n, k]` row-major.
pub fn gemm_bt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64) * 0.5 - 2.0);
        let b = Tensor::<f64>::from_fn(&[4, 5], |i| (i as f64) * 0.25 + 1.0);
        let mut c = vec![0.0; 15];
        gemm(3, 4, 5, a.data(), b.data(), 0.0, &mut c);
        for i in 0..3 {
            for j in 0..5 {
                let mut want = 0.0;
                for l in 0..4 {
                    want += a.data()[i * 4 + l] * b.data()[l * 5 + j];
                }
                assert!((c[i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_transposed_variants() {
        let a = Tensor::<f64>::from_fn(&[4, 3], |i| (i as f64).sin());
        let b = Tensor::<f64>::from_fn(&[4, 5], |i| (i as f64).cos());
        // at: c = a^T @ b, shapes (3,4)x(4,5)
        let mut c = vec![0.0; 15];
        gemm_at(3, 4, 5, a.data(), b.data(), 0.0, &mut c);
        for i in 0..3 {
            for j in 0..5 {
                let mut want = 0.0;
                for l in 0..4 {
                    want += a.data()[l * 3 + i] * b.data()[l * 5 + j];
                }
                assert!((c[i * 5 + j] - want).abs() < 1e-12);
            }
        }
        // bt: c = b @ a^T? use a as the [n,k] matrix: c[4,4] = b[4,5]? keep simple:
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 + 1.0);
        let y = Tensor::<f64>::from_fn(&[4, 3], |i| (i as f64) * 0.1);
        let mut z = vec![0.0; 8];
        gemm_bt(2, 3, 4, x.data(), y.data(), 0.0, &mut z);
        for i in 0..2 {
            for j in 0..4 {
                let mut want = 0.0;
                for l in 0..3 {
                    want += x.data()[i * 3 + l] * y.data()[j * 3 + l];
                }
                assert!((z[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn cast_round_trip_f64_f32() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.125);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
