//! Dense `(channels, height, width)` image tensors and the scalar trait used
//! throughout the crate.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};

/// Floating point scalar usable by the math, the backbone and the sampler.
///
/// Training runs in `f32`; the self-check suite runs in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_raw(
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
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(
                    span(m, k, rsa, csa) as usize <= a.len(),
                    "gemm: A out of bounds"
                );
                assert!(
                    span(k, n, rsb, csb) as usize <= b.len(),
                    "gemm: B out of bounds"
                );
                assert!(
                    span(m, n, rsc, csc) as usize <= c.len(),
                    "gemm: C out of bounds"
                );
                // SAFETY: extents of all three operands were bounds-checked above and
                // strides are non-negative by construction at every call site.
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
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major matrix product helper.
///
/// Computes `c[m×n] = op(a) · op(b) + beta · c` where `op` optionally transposes.
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    T::gemm_raw(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

/// Dense image tensor, row-major over `(channel, row, column)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(channels, height, width);
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!("zero-sized image {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    /// I.i.d. standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
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

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure_same_shape(self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn clip(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        ensure_same_shape(self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the channel axis. All parts must share height and width.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::ShapeMismatch {
                    expected: Shape::new(p.channels(), h, w),
                    actual: p.shape,
                });
            }
            channels += p.channels();
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: Shape::new(channels, h, w),
            data,
        })
    }

    /// Channels `[start, end)` as a new tensor.
    pub fn select_channels(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.channels() {
            return Err(Error::InvalidShape(format!(
                "channel range {start}..{end} outside {}",
                self.shape
            )));
        }
        let p = self.shape.plane();
        Ok(Self {
            shape: Shape::new(end - start, self.height(), self.width()),
            data: self.data[start * p..end * p].to_vec(),
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height() || left + width > self.width()
        {
            return Err(Error::InvalidShape(format!(
                "crop {height}x{width} at ({top},{left}) outside {}",
                self.shape
            )));
        }
        let shape = Shape::new(self.channels(), height, width);
        Ok(Self::from_fn(shape, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width();
        Self::from_fn(self.shape, |c, y, x| self.get(c, y, w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.height();
        Self::from_fn(self.shape, |c, y, x| self.get(c, h - 1 - y, x))
    }

    /// Rotate 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Self {
        let shape = Shape::new(self.channels(), self.width(), self.height());
        let w = self.width();
        Self::from_fn(shape, |c, y, x| self.get(c, x, w - 1 - y))
    }

    /// Average over non-overlapping `factor × factor` blocks.
    pub fn box_downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0
            || !self.height().is_multiple_of(factor)
            || !self.width().is_multiple_of(factor)
        {
            return Err(Error::InvalidShape(format!(
                "{} not divisible by downsample factor {factor}",
                self.shape
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let shape = Shape::new(
            self.channels(),
            self.height() / factor,
            self.width() / factor,
        );
        let norm = T::from_f64_lossy(1.0 / (factor * factor) as f64);
        Ok(Self::from_fn(shape, |c, y, x| {
            let mut acc = T::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(c, y * factor + dy, x * factor + dx);
                }
            }
            acc * norm
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn nearest_upsample(&self, factor: usize) -> Self {
        let shape = Shape::new(
            self.channels(),
            self.height() * factor,
            self.width() * factor,
        );
        Self::from_fn(shape, |c, y, x| self.get(c, y / factor, x / factor))
    }

    /// Repeat a single-channel tensor to `channels` channels.
    pub fn repeat_channels(&self, channels: usize) -> Result<Self> {
        if self.channels() != 1 {
            return Err(Error::InvalidShape(format!(
                "repeat_channels needs one channel, got {}",
                self.shape
            )));
        }
        let parts: Vec<&Self> = std::iter::repeat_n(self, channels).collect();
        Self::concat_channels(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> ImageTensor<f64> {
        ImageTensor::from_fn(shape, |c, y, x| (c * 100 + y * 10 + x) as f64)
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(ImageTensor::<f32>::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(ImageTensor::<f32>::new(0, 2, 2, vec![]).is_err());
        assert!(ImageTensor::<f32>::new(1, 2, 2, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn four_rotations_are_identity() {
        let img = ramp(Shape::new(2, 3, 5));
        let back = img.rot90().rot90().rot90().rot90();
        assert_eq!(img, back);
        assert_eq!(img.rot90().shape(), Shape::new(2, 5, 3));
    }

    #[test]
    fn concat_then_select_roundtrips() {
        let a = ramp(Shape::new(2, 4, 4));
        let b = ramp(Shape::new(1, 4, 4)).map(|v| -v);
        let cat = ImageTensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.channels(), 3);
        assert_eq!(cat.select_channels(0, 2).unwrap(), a);
        assert_eq!(cat.select_channels(2, 3).unwrap(), b);
        let wrong = ramp(Shape::new(1, 4, 5));
        assert!(ImageTensor::concat_channels(&[&a, &wrong]).is_err());
    }

    #[test]
    fn box_downsample_preserves_mean() {
        let img = ramp(Shape::new(3, 8, 8));
        let lr = img.box_downsample(2).unwrap();
        assert_eq!(lr.shape(), Shape::new(3, 4, 4));
        assert!((lr.mean() - img.mean()).abs() < 1e-12);
        assert!(img.box_downsample(3).is_err());
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(false, false, m, n, k, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // transposed operands
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(true, true, m, n, k, &at, &bt, 0.0, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
