//! Dense tensors and the scalar abstraction shared by every network.
//!
//! Networks are generic over [`Real`] so that the same code path runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{FaderError, Result};

/// Floating point scalar with a matrix-multiply kernel.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = alpha * a · b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Strides must describe valid views of the given slices.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Which operand of [`matmul`] is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    N,
    T,
}

/// `c (m×n) = a · b + beta * c` for row-major operands, optionally transposed.
///
/// `a` is `m×k` (or `k×m` when `ta == T`), `b` is `k×n` (or `n×k` when `tb == T`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = match ta {
        Trans::N => (k as isize, 1),
        Trans::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::N => (n as isize, 1),
        Trans::T => (1, k as isize),
    };
    // SAFETY: the asserted lengths match the strided views above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FaderError::Shape(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
        }
    }

    /// Leading-axis slice `[start, start + count)` of an N-d tensor.
    pub fn slice_outer(&self, start: usize, count: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self {
            shape,
            data: self.data[start * inner..(start + count) * inner].to_vec(),
        }
    }
}

/// Activation map in channel-major layout `[C, N, H, W]`.
///
/// Keeping the channel axis outermost lets a convolution be a single
/// `weight · im2col` product with no transposition, and makes per-channel
/// batch statistics contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    /// Elements per channel (`N·H·W`).
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Converts from batch-major `[N, C, H, W]`.
    pub fn from_nchw(t: &Tensor<T>) -> Result<Self> {
        let &[n, c, h, w] = t.shape() else {
            return Err(FaderError::Shape(format!(
                "expected a 4-d batch tensor, got shape {:?}",
                t.shape()
            )));
        };
        let hw = h * w;
        let mut data = vec![T::zero(); t.len()];
        for b in 0..n {
            for ch in 0..c {
                let src = &t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                data[(ch * n + b) * hw..(ch * n + b + 1) * hw].copy_from_slice(src);
            }
        }
        Ok(Self { c, n, h, w, data })
    }

    /// Converts to batch-major `[N, C, H, W]`.
    pub fn to_nchw(&self) -> Tensor<T> {
        let hw = self.h * self.w;
        let mut data = vec![T::zero(); self.data.len()];
        for ch in 0..self.c {
            for b in 0..self.n {
                let src = &self.data[(ch * self.n + b) * hw..(ch * self.n + b + 1) * hw];
                data[(b * self.c + ch) * hw..(b * self.c + ch + 1) * hw].copy_from_slice(src);
            }
        }
        Tensor {
            shape: vec![self.n, self.c, self.h, self.w],
            data,
        }
    }

    /// Appends `values.len()` constant channels; channel `j` is filled with `values[j][b]`
    /// for batch element `b`.
    pub fn with_constant_channels(&self, values: &[Vec<T>]) -> Self {
        let plane = self.plane();
        let hw = self.h * self.w;
        let mut data = Vec::with_capacity(self.data.len() + values.len() * plane);
        data.extend_from_slice(&self.data);
        for per_sample in values {
            debug_assert_eq!(per_sample.len(), self.n);
            for &v in per_sample {
                data.extend(std::iter::repeat_n(v, hw));
            }
        }
        Self {
            c: self.c + values.len(),
            n: self.n,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Drops all channels from `keep` onward.
    pub fn truncate_channels(mut self, keep: usize) -> Self {
        let plane = self.plane();
        self.data.truncate(keep * plane);
        self.c = keep;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        matmul(2, 3, 2, &a, Trans::N, &b, Trans::N, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // aᵀ stored as 3×2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0f64; 4];
        matmul(2, 3, 2, &at, Trans::T, &bt, Trans::T, 1.0, &mut c2);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn layout_round_trip() {
        let t = Tensor::from_vec(&[2, 3, 2, 2], (0..24).map(f64::from).collect()).unwrap();
        let fm = FeatureMap::from_nchw(&t).unwrap();
        assert_eq!(fm.data[4], 12.0); // channel 0, sample 1
        assert_eq!(fm.to_nchw(), t);
    }

    #[test]
    fn constant_channels_broadcast() {
        let fm = FeatureMap::<f32>::zeros(1, 2, 2, 2);
        let out = fm.with_constant_channels(&[vec![1.0, 2.0]]);
        assert_eq!(out.c, 2);
        assert_eq!(&out.data[8..], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(out.truncate_channels(1).data, vec![0.0; 8]);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
