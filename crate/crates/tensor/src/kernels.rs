//! Slice-level numeric kernels shared by forward and backward passes.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.ksize * self.ksize
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold `c_in x h x w` into a `(c_in*k*k) x (h_out*w_out)` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.cols();
    let k = g.ksize;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let shift = kx as isize - g.pad as isize;
                        for (ox, d) in row.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    } else {
                        for (ox, d) in row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate patch gradients back into the image.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.cols();
    let k = g.ksize;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &col[r * cols..(r + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    c_out: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); c_out * cols];
    for (co, b) in bias.iter().enumerate() {
        out[co * cols..(co + 1) * cols].fill(*b);
    }
    if g.ksize == 1 && g.stride == 1 {
        T::gemm(c_out, rows, cols, T::one(), weight, (rows, 1), x, (cols, 1), T::one(), &mut out, (cols, 1));
        return out;
    }
    let mut col = vec![T::zero(); rows * cols];
    im2col(x, g, &mut col);
    T::gemm(c_out, rows, cols, T::one(), weight, (rows, 1), &col, (cols, 1), T::one(), &mut out, (cols, 1));
    out
}

/// Returns `(d_input, d_weight, d_bias)`; the input gradient is skipped when
/// `need_input` is false.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    c_out: usize,
    g: &ConvGeom,
    need_input: bool,
    need_params: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, cols) = (g.rows(), g.cols());
    let direct = g.ksize == 1 && g.stride == 1;
    let col_owned;
    let col: &[T] = if direct {
        x
    } else {
        let mut c = vec![T::zero(); rows * cols];
        im2col(x, g, &mut c);
        col_owned = c;
        &col_owned
    };
    let (dw, db) = if need_params {
        let mut dw = vec![T::zero(); c_out * rows];
        T::gemm(c_out, cols, rows, T::one(), dout, (cols, 1), col, (1, cols), T::zero(), &mut dw, (rows, 1));
        let db = (0..c_out)
            .map(|co| dout[co * cols..(co + 1) * cols].iter().copied().sum())
            .collect();
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    let dx = if need_input {
        let mut dcol = vec![T::zero(); rows * cols];
        T::gemm(rows, c_out, cols, T::one(), weight, (1, rows), dout, (cols, 1), T::zero(), &mut dcol, (cols, 1));
        if direct {
            Some(dcol)
        } else {
            let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
            col2im(&dcol, g, &mut dx);
            Some(dx)
        }
    } else {
        None
    };
    (dx, dw, db)
}

/// Source taps for bilinear x2 upsampling along one axis (align_corners = false).
pub(crate) fn upsample_taps(n_in: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * ho * wo];
    // Horizontal pass into a c x h x wo buffer, then vertical.
    let mut tmp = vec![T::zero(); c * h * wo];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut tmp[(ch * h + y) * wo..(ch * h + y + 1) * wo];
            for (d, &(i0, i1, w0, w1)) in dst.iter_mut().zip(&tx) {
                *d = src[i0] * T::of(w0) + src[i1] * T::of(w1);
            }
        }
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            let r0 = (ch * h + i0) * wo;
            let r1 = (ch * h + i1) * wo;
            let dst = &mut out[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = tmp[r0 + ox] * w0 + tmp[r1 + ox] * w1;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dout: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    let mut tmp = vec![T::zero(); h * wo];
    for ch in 0..c {
        tmp.fill(T::zero());
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            let src = &dout[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
            for (ox, &v) in src.iter().enumerate() {
                tmp[i0 * wo + ox] += v * w0;
                tmp[i1 * wo + ox] += v * w1;
            }
        }
        for y in 0..h {
            let src = &tmp[y * wo..(y + 1) * wo];
            let dst = &mut dx[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (&v, &(i0, i1, w0, w1)) in src.iter().zip(&tx) {
                dst[i0] += v * T::of(w0);
                dst[i1] += v * T::of(w1);
            }
        }
    }
    dx
}

/// Batched `out[b] = op(a[b]) * op(b[b])` where each operand may be transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    out: &mut [T],
) {
    let a_str = if a_t { (1, m) } else { (k, 1) };
    let b_str = if b_t { (1, k) } else { (n, 1) };
    let small = m * k * n < 4096;
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        if small {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += ab[i * a_str.0 + p * a_str.1] * bb[p * b_str.0 + j * b_str.1];
                    }
                    ob[i * n + j] = acc;
                }
            }
        } else {
            T::gemm(m, k, n, T::one(), ab, a_str, bb, b_str, T::zero(), ob, (n, 1));
        }
    }
}
