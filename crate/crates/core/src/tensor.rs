//! Dense tensors in channel-major `[C, B, H, W]` layout.
//!
//! Putting channels outermost makes every convolution a single GEMM of the
//! kernel matrix against a `[C·kh·kw, B·H·W]` column buffer, and turns
//! channel concatenation into plain slice concatenation. Vectors (latent
//! codes, dense activations) use `[F, B, 1, 1]`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type. Training runs in `f32`; gradient checks use
/// `f64` through the same code paths.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static
{
    /// `C ← α·A·B + β·C` on strided row/column-major buffers.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping `m×k`,
    /// `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn f(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn to_f(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    /// `exp` for activations; a branch-free polynomial in `f32`.
    #[inline]
    fn fexp(self) -> Self {
        self.exp()
    }

    #[inline]
    fn fexpm1(self) -> Self {
        self.exp_m1()
    }

    #[inline]
    fn ftanh(self) -> Self {
        self.tanh()
    }
}

/// `exp(x)` with relative error below `2e-7` on the clamped range
/// `[-87.3, 88.3]`.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    let x = x.clamp(-87.3, 88.3);
    let n = (x * std::f32::consts::LOG2_E + 0.5).floor();
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

impl Scalar for f32 {
    #[inline]
    fn fexp(self) -> f32 {
        exp_f32(self)
    }

    #[inline]
    fn fexpm1(self) -> f32 {
        if self.abs() < 1e-3 {
            self * (1.0 + self * (0.5 + self * (1.0 / 6.0)))
        } else {
            exp_f32(self) - 1.0
        }
    }

    #[inline]
    fn ftanh(self) -> f32 {
        let e = exp_f32(-2.0 * self.abs());
        ((1.0 - e) / (1.0 + e)).copysign(self)
    }

    unsafe fn gemm(
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

impl Scalar for f64 {
    unsafe fn gemm(
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

/// `out (m×n) = α·op(a)·op(b) + β·out` for dense row-major buffers, where
/// `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    beta: T,
    out: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(out.len(), m * n, "out size");
    if m == 0 || n == 0 {
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
    // SAFETY: lengths asserted above; `out` is exclusively borrowed.
    unsafe {
        T::gemm(
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec([1, 1, 1, 1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn batch(&self) -> usize {
        self.shape[1]
    }

    /// Number of elements in one channel plane (`B·H·W`).
    pub fn plane(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn at(&self, c: usize, b: usize, h: usize, w: usize) -> T {
        let [_, bs, hs, ws] = self.shape;
        self.data[((c * bs + b) * hs + h) * ws + w]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, b: usize, h: usize, w: usize) -> &mut T {
        let [_, bs, hs, ws] = self.shape;
        &mut self.data[((c * bs + b) * hs + h) * ws + w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::f(v.to_f())).collect(),
        }
    }

    /// Copies batch items `idx` into a new tensor, in the given order.
    pub fn select_batch(&self, idx: &[usize]) -> Tensor<T> {
        let [c, b, h, w] = self.shape;
        let hw = h * w;
        let mut out = Tensor::zeros([c, idx.len(), h, w]);
        for ch in 0..c {
            for (j, &i) in idx.iter().enumerate() {
                assert!(i < b, "batch index out of range");
                let src = (ch * b + i) * hw;
                let dst = (ch * idx.len() + j) * hw;
                out.data[dst..dst + hw].copy_from_slice(&self.data[src..src + hw]);
            }
        }
        out
    }

    /// Stacks tensors along the batch axis.
    pub fn cat_batch(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "cat_batch of nothing");
        let [c, _, h, w] = parts[0].shape;
        let total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let hw = h * w;
        let mut out = Tensor::zeros([c, total, h, w]);
        for ch in 0..c {
            let mut off = 0;
            for p in parts {
                assert_eq!([p.shape[0], p.shape[2], p.shape[3]], [c, h, w], "cat_batch shape");
                let n = p.shape[1] * hw;
                let dst = (ch * total) * hw + off;
                out.data[dst..dst + n].copy_from_slice(&p.data[ch * n..(ch + 1) * n]);
                off += n;
            }
        }
        out
    }
}
