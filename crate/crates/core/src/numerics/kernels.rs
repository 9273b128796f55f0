//! Raw loops behind the graph primitives. Every loop runs in a fixed order so results are
//! bit-reproducible.

use crate::numerics::Scalar;

/// `(m, k) x (k, n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `(m, n) x (k, n)^T -> (m, k)`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `(m, k)^T x (m, n) -> (k, n)`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Valid output range `lo..hi` for a tap at offset `d` over an axis of length `len`.
#[inline]
fn tap_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Depthwise 3x3 convolution with zero "same" padding; `x` is `(c, h, w)`, `k` is `(c, 3, 3)`.
pub fn depthwise3x3<T: Scalar>(x: &[T], k: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    let plane = h * w;
    for ch in 0..c {
        let src = &x[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = tap_range(dy, h);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let wt = k[ch * 9 + ky * 3 + kx];
                if wt == T::zero() {
                    continue;
                }
                let (x0, x1) = tap_range(dx, w);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let srow = &src[sy * w..(sy + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for xx in x0..x1 {
                        drow[xx] += wt * srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`depthwise3x3`] with respect to its input and kernel.
pub fn depthwise3x3_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    gy: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let plane = h * w;
    let mut gx = vec![T::zero(); c * plane];
    let mut gk = vec![T::zero(); c * 9];
    for ch in 0..c {
        let src = &x[ch * plane..(ch + 1) * plane];
        let g = &gy[ch * plane..(ch + 1) * plane];
        let gsrc = &mut gx[ch * plane..(ch + 1) * plane];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = tap_range(dy, h);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let wt = k[ch * 9 + ky * 3 + kx];
                let (x0, x1) = tap_range(dx, w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    for xx in x0..x1 {
                        let sx = (xx as isize + dx) as usize;
                        let gv = g[y * w + xx];
                        acc += gv * src[sy * w + sx];
                        gsrc[sy * w + sx] += wt * gv;
                    }
                }
                gk[ch * 9 + ky * 3 + kx] = acc;
            }
        }
    }
    (gx, gk)
}

/// `(c, h, w) -> (c r^2, h/r, w/r)`; output channel `c r^2 + i r + j` holds `x[c, y r + i, x r + j]`.
pub fn pixel_unshuffle<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let oc = ch * r * r + i * r + j;
                for y in 0..oh {
                    for xx in 0..ow {
                        out[(oc * oh + y) * ow + xx] = x[(ch * h + y * r + i) * w + xx * r + j];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_unshuffle`]: `(c r^2, h, w) -> (c, h r, w r)`.
pub fn pixel_shuffle<T: Scalar>(x: &[T], c_in: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let c = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let ic = ch * r * r + i * r + j;
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * oh + y * r + i) * ow + xx * r + j] = x[(ic * h + y) * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
#[inline]
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt())
}
