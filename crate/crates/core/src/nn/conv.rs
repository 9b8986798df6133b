//! Same-padded strided convolution and its transpose, lowered to GEMM.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{gemm, Real, Trans};

/// Geometry of a same-padded convolution over a `c×h×w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize) -> Self {
        assert!(stride > 0 && kernel > 0);
        let out_h = height.div_ceil(stride);
        let out_w = width.div_ceil(stride);
        let pad_h = ((out_h.saturating_sub(1)) * stride + kernel).saturating_sub(height);
        let pad_w = ((out_w.saturating_sub(1)) * stride + kernel).saturating_sub(width);
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            out_h,
            out_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    #[inline]
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    #[inline]
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds `x` (`c×h×w`) into `cols` (`c·k·k × out_h·out_w`), zero outside the image.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let ohw = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * ohw);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - g.pad_left as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters `cols` back onto `x`, accumulating.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let ohw = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. Returns the output and the unfolded
/// columns of every image (kept for the weight gradient).
pub fn conv_forward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    out_c: usize,
) -> (Vec<T>, Vec<T>) {
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); batch * rows * ohw];
    let mut out = vec![T::zero(); batch * out_c * ohw];
    for n in 0..batch {
        let xc = &x[n * g.input_len()..(n + 1) * g.input_len()];
        let cn = &mut cols[n * rows * ohw..(n + 1) * rows * ohw];
        im2col(xc, g, cn);
        let yn = &mut out[n * out_c * ohw..(n + 1) * out_c * ohw];
        for (o, line) in yn.chunks_exact_mut(ohw).enumerate() {
            line.fill(bias[o]);
        }
        gemm(
            out_c,
            rows,
            ohw,
            T::one(),
            weight,
            Trans::No,
            cn,
            Trans::No,
            T::one(),
            yn,
        );
    }
    (out, cols)
}

/// Gradients of [`conv_forward`]. `dx` is only produced when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    dy: &[T],
    cols: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_c: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let mut dw = vec![T::zero(); out_c * rows];
    let mut db = vec![T::zero(); out_c];
    let mut dx = want_dx.then(|| vec![T::zero(); batch * g.input_len()]);
    let mut dcols = if want_dx {
        vec![T::zero(); rows * ohw]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        let dyn_ = &dy[n * out_c * ohw..(n + 1) * out_c * ohw];
        let cn = &cols[n * rows * ohw..(n + 1) * rows * ohw];
        gemm(
            out_c,
            ohw,
            rows,
            T::one(),
            dyn_,
            Trans::No,
            cn,
            Trans::Yes,
            T::one(),
            &mut dw,
        );
        for (o, line) in dyn_.chunks_exact(ohw).enumerate() {
            db[o] += line.iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                rows,
                out_c,
                ohw,
                T::one(),
                weight,
                Trans::Yes,
                dyn_,
                Trans::No,
                T::zero(),
                &mut dcols,
            );
            col2im(&dcols, g, &mut dx[n * g.input_len()..(n + 1) * g.input_len()]);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: the adjoint of a same-padded conv whose input is
/// the `g`-shaped output here. `x` is `batch × in_c × g.out_h × g.out_w`,
/// `weight` is `in_c × g.channels × k × k`.
pub fn conv_transpose_forward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    in_c: usize,
) -> Vec<T> {
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * ohw];
    let mut out = vec![T::zero(); batch * g.input_len()];
    let plane = g.height * g.width;
    for n in 0..batch {
        let xn = &x[n * in_c * ohw..(n + 1) * in_c * ohw];
        gemm(
            rows,
            in_c,
            ohw,
            T::one(),
            weight,
            Trans::Yes,
            xn,
            Trans::No,
            T::zero(),
            &mut cols,
        );
        let yn = &mut out[n * g.input_len()..(n + 1) * g.input_len()];
        for (c, p) in yn.chunks_exact_mut(plane).enumerate() {
            p.fill(bias[c]);
        }
        col2im(&cols, g, yn);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<T: Real>(
    dy: &[T],
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    in_c: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (rows, ohw) = (g.col_rows(), g.col_cols());
    let plane = g.height * g.width;
    let mut dcols = vec![T::zero(); rows * ohw];
    let mut dw = vec![T::zero(); in_c * rows];
    let mut db = vec![T::zero(); g.channels];
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_c * ohw]);
    for n in 0..batch {
        let dyn_ = &dy[n * g.input_len()..(n + 1) * g.input_len()];
        for (c, p) in dyn_.chunks_exact(plane).enumerate() {
            db[c] += p.iter().copied().sum::<T>();
        }
        im2col(dyn_, g, &mut dcols);
        let xn = &x[n * in_c * ohw..(n + 1) * in_c * ohw];
        gemm(
            in_c,
            ohw,
            rows,
            T::one(),
            xn,
            Trans::No,
            &dcols,
            Trans::Yes,
            T::one(),
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                in_c,
                rows,
                ohw,
                T::one(),
                weight,
                Trans::No,
                &dcols,
                Trans::No,
                T::zero(),
                &mut dx[n * in_c * ohw..(n + 1) * in_c * ohw],
            );
        }
    }
    (dx, dw, db)
}
