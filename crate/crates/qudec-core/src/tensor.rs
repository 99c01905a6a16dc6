//! Dense row-major tensors over `f32`/`f64`.
//!
//! The training path runs in `f32`; the loss-module gradient checks and all
//! image-quality numerics run in `f64`. The [`Scalar`] trait abstracts the two
//! and dispatches matrix multiplication to `matrixmultiply`'s sgemm/dgemm.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxs(self, other: Self) -> Self;
    fn mins(self, other: Self) -> Self;
    fn mul_add(self, a: Self, b: Self) -> Self;
    /// C := alpha * A(m×k) * B(k×n) + beta * C(m×n), with explicit strides
    /// (row stride, column stride) per operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn maxs(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn mins(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn mul_add(self, a: Self, b: Self) -> Self {
                <$t>::mul_add(self, a, b)
            }
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                // Safety: callers guarantee the strided index sets stay within
                // the provided slices; the wrapper only converts to pointers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major C := alpha*A*B + beta*C for contiguous row-major operands.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    T::gemm_strided(
        m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
    );
}

/// A dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; len],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar_value(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets the tensor as (channels, height, width).
    #[inline]
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected 3-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x] = v;
    }

    /// Channel `c` as a contiguous (h*w) slice of a 3-d tensor.
    pub fn channel(&self, c: usize) -> &[T] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let (_, h, w) = self.chw();
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    /// The single element of a scalar-shaped tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::ZERO;
        }
        let mut s = T::ZERO;
        for &v in &self.data {
            s += v;
        }
        s / T::from_f64(self.data.len() as f64)
    }

    pub fn min_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::from_f64(f64::INFINITY), |a, b| a.mins(b))
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::from_f64(f64::NEG_INFINITY), |a, b| a.maxs(b))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

/// Area-average downsampling by an integer factor (antialiased; a constant
/// image maps to itself and downsampling by 2 twice equals downsampling by 4).
pub fn downsample_area<T: Scalar>(t: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, h, w) = t.chw();
    assert!(
        h % factor == 0 && w % factor == 0,
        "downsample: {}x{} not divisible by {}",
        h,
        w,
        factor
    );
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::from_f64(1.0 / (factor * factor) as f64);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        let src = t.channel(ci);
        let dst = out.channel_mut(ci);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::ZERO;
                for dy in 0..factor {
                    let row = &src[((oy * factor + dy) * w + ox * factor)..][..factor];
                    for &v in row {
                        s += v;
                    }
                }
                dst[oy * ow + ox] = s * norm;
            }
        }
    }
    out
}

/// Reflection padding of a (C,H,W) tensor on the bottom/right to the target
/// size. Uses mirror indexing without repeating the edge sample, folding as
/// many times as needed so any padded size is valid.
pub fn pad_reflect<T: Scalar>(t: &Tensor<T>, target_h: usize, target_w: usize) -> Tensor<T> {
    let (c, h, w) = t.chw();
    assert!(target_h >= h && target_w >= w);
    if target_h == h && target_w == w {
        return t.clone();
    }
    let mut out = Tensor::zeros(&[c, target_h, target_w]);
    for ci in 0..c {
        let src = t.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..target_h {
            let sy = mirror_index(y, h);
            for x in 0..target_w {
                let sx = mirror_index(x, w);
                dst[y * target_w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

/// Mirror (reflect-without-edge-repeat) index into `0..n`.
pub fn mirror_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Crops the top-left (C, h, w) corner.
pub fn crop<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, th, tw) = t.chw();
    assert!(h <= th && w <= tw);
    if h == th && w == tw {
        return t.clone();
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = t.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[y * tw..y * tw + w]);
        }
    }
    out
}

/// Circular (wrapping) shift by (dy, dx); inverted by shifting by (-dy, -dx).
pub fn circular_shift<T: Scalar>(t: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let (c, h, w) = t.chw();
    let mut out = Tensor::zeros(&[c, h, w]);
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    for ci in 0..c {
        let src = t.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..h {
            let ty = (y + sy) % h;
            for x in 0..w {
                let tx = (x + sx) % w;
                dst[ty * w + tx] = src[y * w + x];
            }
        }
    }
    out
}
