//! im2col / col2im convolution kernels on top of the strided GEMM.
//!
//! Kernels are square. `Conv2d` weights are `[out, in, k, k]`; transposed
//! convolution weights are `[in, out, k, k]`, so a transposed convolution is
//! the exact adjoint of the matching `Conv2d` with respect to its input.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a strided convolution reading a `channels × height × width`
    /// image; `None` when the kernel does not fit.
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = (height + 2 * pad).checked_sub(kernel)?;
        let span_w = (width + 2 * pad).checked_sub(kernel)?;
        if stride == 0 {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image (`[C, H, W]`) into `[C·k·k, out_h·out_w]`.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
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

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `img`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-sample convolution forward. `out` is `[C_out, out_h·out_w]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    cols: &mut [T],
    out: &mut [T],
) {
    im2col(x, g, cols);
    let kk = g.col_rows();
    let p = g.col_cols();
    T::gemm(c_out, kk, p, T::one(), weight, kk, 1, cols, p, 1, T::zero(), out, p, 1);
    if let Some(b) = bias {
        add_channel_bias(out, b, p);
    }
}

/// Accumulates the weight gradient and, when `dx` is given, the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    dout: &[T],
    g: &ConvGeom,
    weight: &[T],
    c_out: usize,
    cols: &[T],
    dweight: Option<&mut [T]>,
    dx: Option<&mut [T]>,
    dcols_scratch: &mut [T],
) {
    let kk = g.col_rows();
    let p = g.col_cols();
    if let Some(dw) = dweight {
        // dW[c_out, kk] += dout[c_out, p] · colsᵀ[p, kk]
        T::gemm(c_out, p, kk, T::one(), dout, p, 1, cols, 1, p, T::one(), dw, kk, 1);
    }
    if let Some(dx) = dx {
        // dcols[kk, p] = Wᵀ[kk, c_out] · dout[c_out, p]
        T::gemm(
            kk,
            c_out,
            p,
            T::one(),
            weight,
            1,
            kk,
            dout,
            p,
            1,
            T::zero(),
            dcols_scratch,
            p,
            1,
        );
        col2im(dcols_scratch, g, dx);
    }
}

/// Per-sample transposed convolution forward.
///
/// `g` describes the *output* image as the convolution source, so
/// `g.out_h × g.out_w` is the input grid. `weight` is `[C_in, C_out·k·k]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    cols: &mut [T],
    out: &mut [T],
) {
    let kk = g.col_rows();
    let p = g.col_cols();
    // cols[kk, p] = Wᵀ[kk, c_in] · x[c_in, p]
    T::gemm(kk, c_in, p, T::one(), weight, 1, kk, x, p, 1, T::zero(), cols, p, 1);
    out.iter_mut().for_each(|v| *v = T::zero());
    col2im(cols, g, out);
    if let Some(b) = bias {
        add_channel_bias(out, b, g.height * g.width);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    dout: &[T],
    g: &ConvGeom,
    weight: &[T],
    x: &[T],
    c_in: usize,
    dweight: Option<&mut [T]>,
    dx: Option<&mut [T]>,
    dcols_scratch: &mut [T],
) {
    let kk = g.col_rows();
    let p = g.col_cols();
    im2col(dout, g, dcols_scratch);
    if let Some(dw) = dweight {
        // dW[c_in, kk] += x[c_in, p] · dcolsᵀ[p, kk]
        T::gemm(c_in, p, kk, T::one(), x, p, 1, dcols_scratch, 1, p, T::one(), dw, kk, 1);
    }
    if let Some(dx) = dx {
        // dx[c_in, p] += W[c_in, kk] · dcols[kk, p]
        T::gemm(
            c_in,
            kk,
            p,
            T::one(),
            weight,
            kk,
            1,
            dcols_scratch,
            p,
            1,
            T::one(),
            dx,
            p,
            1,
        );
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v = *v + b;
        }
    }
}

pub fn channel_sums<T: Scalar>(dout: &[T], channels: usize, plane: usize, acc: &mut [T]) {
    for c in 0..channels {
        let s = dout[c * plane..(c + 1) * plane].iter().fold(T::zero(), |a, &v| a + v);
        acc[c] = acc[c] + s;
    }
}
