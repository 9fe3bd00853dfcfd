//! Raw-buffer layer kernels: 3×3 same-padding convolution through im2col and
//! GEMM, 2×2 average pooling, nearest upsampling, pixel shuffle and ReLU, each
//! with its exact reverse-mode counterpart.

use crate::tensor::{gemm, Real};

pub(crate) const KERNEL: usize = 3;
pub(crate) const TAPS: usize = KERNEL * KERNEL;

/// Location of one convolution's weights inside the flat parameter vector.
/// Weights are stored `[cout, cin * 9]`, biases `[cout]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv {
    pub fn weight<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.w_off..self.w_off + self.cout * self.cin * TAPS]
    }

    pub fn bias<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.b_off..self.b_off + self.cout]
    }
}

/// Unfold `x[c, h, w]` into `col[c * 9, h * w]` with zero padding of one pixel.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let zero = T::zero();
    let mut col = Vec::with_capacity(c * TAPS * plane);
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        col.extend(std::iter::repeat_n(zero, w));
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            col.push(zero);
                            col.extend_from_slice(&s[..w - 1]);
                        }
                        1 => col.extend_from_slice(s),
                        _ => {
                            col.extend_from_slice(&s[1..]);
                            col.push(zero);
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add `col` back into `dx[c, h, w]`.
pub(crate) fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let plane = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[(ci * TAPS + ky * KERNEL + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => d[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(a, &b)| *a += b),
                        1 => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
                        _ => d[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(a, &b)| *a += b),
                    }
                }
            }
        }
    }
}

/// What a convolution keeps for its backward pass.
pub(crate) enum Saved<T> {
    /// im2col unfolding `[cin * 9, h * w]` (GEMM path).
    Col(Vec<T>),
    /// Zero-padded input, one `(h + 2) * (w + 2) + 2` plane per channel (direct path).
    Padded(Vec<T>),
}

/// Layers with fewer output channels than this use the direct path: GEMM
/// kernels waste most of their tile on a handful of rows.
const DIRECT_MAX_COUT: usize = 8;

#[inline]
fn padded_plane(h: usize, w: usize) -> usize {
    (h + 2) * (w + 2) + 2
}

fn pad_input<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let pw = w + 2;
    let zero = T::zero();
    let mut pad = Vec::with_capacity(c * padded_plane(h, w));
    for ci in 0..c {
        pad.extend(std::iter::repeat_n(zero, pw + 1));
        for y in 0..h {
            pad.extend_from_slice(&x[(ci * h + y) * w..][..w]);
            pad.extend_from_slice(&[zero, zero]);
        }
        pad.extend(std::iter::repeat_n(zero, pw + 1));
    }
    pad
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * LANES..][..LANES], &b[i * LANES..][..LANES]);
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Returns the pre-activation output `[cout, h * w]` and what backward needs.
pub(crate) fn conv_forward<T: Real>(
    conv: &Conv,
    params: &[T],
    x: &[T],
    h: usize,
    w: usize,
) -> (Vec<T>, Saved<T>) {
    let plane = h * w;
    let mut out = vec![T::zero(); conv.cout * plane];
    let bias = conv.bias(params);
    if conv.cout < DIRECT_MAX_COUT {
        // output computed on a (w + 2)-wide grid whose last two columns are discarded
        let pw = w + 2;
        let pp = padded_plane(h, w);
        let span = h * pw;
        let pad = pad_input(x, conv.cin, h, w);
        let weight = conv.weight(params);
        let mut acc = vec![T::zero(); span];
        for co in 0..conv.cout {
            acc.fill(bias[co]);
            for ci in 0..conv.cin {
                let kern = &weight[(co * conv.cin + ci) * TAPS..][..TAPS];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let src = &pad[ci * pp + ky * pw + kx..][..span];
                        axpy(&mut acc, kern[ky * KERNEL + kx], src);
                    }
                }
            }
            for y in 0..h {
                out[co * plane + y * w..][..w].copy_from_slice(&acc[y * pw..][..w]);
            }
        }
        return (out, Saved::Padded(pad));
    }
    let k = conv.cin * TAPS;
    let col = im2col(x, conv.cin, h, w);
    for (co, &b) in bias.iter().enumerate() {
        out[co * plane..(co + 1) * plane].fill(b);
    }
    gemm(
        false,
        false,
        conv.cout,
        plane,
        k,
        conv.weight(params),
        &col,
        T::one(),
        &mut out,
    );
    (out, Saved::Col(col))
}

/// Accumulates weight and bias gradients into `grads`; returns the input
/// gradient when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    conv: &Conv,
    params: &[T],
    saved: &Saved<T>,
    dout: &[T],
    h: usize,
    w: usize,
    grads: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let plane = h * w;
    let k = conv.cin * TAPS;
    for co in 0..conv.cout {
        let s: T = dout[co * plane..(co + 1) * plane].iter().copied().sum();
        grads[conv.b_off + co] += s;
    }
    match saved {
        Saved::Col(col) => {
            {
                let dw = &mut grads[conv.w_off..conv.w_off + conv.cout * k];
                gemm(false, true, conv.cout, k, plane, dout, col, T::one(), dw);
            }
            if !need_dx {
                return None;
            }
            let mut dcol = vec![T::zero(); k * plane];
            gemm(
                true,
                false,
                k,
                plane,
                conv.cout,
                conv.weight(params),
                dout,
                T::zero(),
                &mut dcol,
            );
            let mut dx = vec![T::zero(); conv.cin * plane];
            col2im(&dcol, conv.cin, h, w, &mut dx);
            Some(dx)
        }
        Saved::Padded(pad) => {
            let pw = w + 2;
            let pp = padded_plane(h, w);
            let span = h * pw;
            // dout on the (w + 2)-wide grid, zero in the two discarded columns
            let mut dgrid = vec![T::zero(); conv.cout * span];
            for co in 0..conv.cout {
                for y in 0..h {
                    dgrid[co * span + y * pw..][..w]
                        .copy_from_slice(&dout[co * plane + y * w..][..w]);
                }
            }
            let weight = conv.weight(params);
            let mut dpad = if need_dx {
                vec![T::zero(); conv.cin * pp]
            } else {
                Vec::new()
            };
            for co in 0..conv.cout {
                let g = &dgrid[co * span..][..span];
                for ci in 0..conv.cin {
                    let base = conv.w_off + (co * conv.cin + ci) * TAPS;
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let off = ci * pp + ky * pw + kx;
                            grads[base + ky * KERNEL + kx] += dot(g, &pad[off..][..span]);
                            if need_dx {
                                let wv = weight[(co * conv.cin + ci) * TAPS + ky * KERNEL + kx];
                                axpy(&mut dpad[off..][..span], wv, g);
                            }
                        }
                    }
                }
            }
            if !need_dx {
                return None;
            }
            let mut dx = vec![T::zero(); conv.cin * plane];
            for ci in 0..conv.cin {
                for y in 0..h {
                    dx[(ci * h + y) * w..][..w]
                        .copy_from_slice(&dpad[ci * pp + (y + 1) * pw + 1..][..w]);
                }
            }
            Some(dx)
        }
    }
}

pub(crate) fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Zero the gradient wherever the ReLU output was clamped.
pub(crate) fn relu_backward_inplace<T: Real>(grad: &mut [T], out: &[T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if !(o > T::zero()) {
            *g = T::zero();
        }
    }
}

/// 2×2 average pooling of `x[c, h, w]`; `h` and `w` must be even.
pub(crate) fn avgpool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let src = &x[ci * h * w..];
        let dst = &mut out[ci * oh * ow..];
        for y in 0..oh {
            let r0 = &src[2 * y * w..];
            let r1 = &src[(2 * y + 1) * w..];
            for xx in 0..ow {
                dst[y * ow + xx] =
                    (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter;
            }
        }
    }
    out
}

/// Gradient of [`avgpool2`] with respect to its `[c, h, w]` input.
pub(crate) fn avgpool2_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                dx[(ci * h + y) * w + x] = dy[(ci * oh + y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest 2× upsampling of `x[c, h, w]` to `[c, 2h, 2w]`.
pub(crate) fn upsample2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let src = &x[(ci * h + y / 2) * w..][..w];
            let dst = &mut out[(ci * oh + y) * ow..][..ow];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]; `h`, `w` are the small (input) dimensions.
pub(crate) fn upsample2_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            let src = &dy[(ci * oh + y) * ow..][..ow];
            let dst = &mut dx[(ci * h + y / 2) * w..][..w];
            for (xx, &g) in src.iter().enumerate() {
                dst[xx / 2] += g;
            }
        }
    }
    dx
}

/// `[c * r * r, h, w]` to `[c, h * r, w * r]`.
pub(crate) fn pixel_shuffle<T: Real>(x: &[T], c: usize, r: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for i in 0..r {
            for j in 0..r {
                let sc = ci * r * r + i * r + j;
                for y in 0..h {
                    for xx in 0..w {
                        out[(ci * oh + y * r + i) * ow + xx * r + j] = x[(sc * h + y) * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Inverse (and adjoint) of [`pixel_shuffle`].
pub(crate) fn pixel_unshuffle<T: Real>(x: &[T], c: usize, r: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); c * r * r * h * w];
    for ci in 0..c {
        for i in 0..r {
            for j in 0..r {
                let sc = ci * r * r + i * r + j;
                for y in 0..h {
                    for xx in 0..w {
                        out[(sc * h + y) * w + xx] = x[(ci * oh + y * r + i) * ow + xx * r + j];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        weight: &[f64],
        bias: &[f64],
    ) -> Vec<f64> {
        let cout = bias.len();
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[(co * cin + ci) * 9 + ky * 3 + kx]
                                    * x[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(co * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for cout in [4, 9] {
            conv_case(3, cout, 5, 7);
        }
    }

    fn conv_case(cin: usize, cout: usize, h: usize, w: usize) {
        let x: Vec<f64> = (0..cin * h * w)
            .map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let n_w = cout * cin * 9;
        let mut params: Vec<f64> = (0..n_w + cout)
            .map(|i| ((i * 13) % 17) as f64 / 17.0 - 0.5)
            .collect();
        params[n_w] = 0.25;
        let conv = Conv {
            cin,
            cout,
            w_off: 0,
            b_off: n_w,
        };
        let (out, _) = conv_forward(&conv, &params, &x, h, w);
        let want = naive_conv(&x, cin, h, w, &params[..n_w], &params[n_w..]);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let (c, h, w) = (2, 4, 5);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let cv: Vec<f64> = (0..c * 9 * h * w)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let col = im2col(&x, c, h, w);
        let mut back = vec![0.0; c * h * w];
        col2im(&cv, c, h, w, &mut back);
        let lhs: f64 = col.iter().zip(&cv).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_and_upsampling_adjoints() {
        let (c, h, w) = (2, 4, 6);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
        let g: Vec<f64> = (0..c * h * w / 4).map(|i| (i as f64 * 0.7).cos()).collect();
        let pooled = avgpool2(&x, c, h, w);
        let lhs: f64 = pooled.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .iter()
            .zip(avgpool2_backward(&g, c, h, w))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let up = upsample2(&g, c, h / 2, w / 2);
        let lhs: f64 = up.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = g
            .iter()
            .zip(upsample2_backward(&x, c, h / 2, w / 2))
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pixel_shuffle_roundtrip() {
        let (c, r, h, w) = (3, 2, 3, 4);
        let x: Vec<f64> = (0..c * r * r * h * w).map(|i| i as f64).collect();
        let y = pixel_shuffle(&x, c, r, h, w);
        assert_eq!(pixel_unshuffle(&y, c, r, h, w), x);
        // channel (c=0, i=1, j=0) lands on odd rows, even columns
        assert_eq!(y[w * r], x[2 * h * w]);
    }
}
