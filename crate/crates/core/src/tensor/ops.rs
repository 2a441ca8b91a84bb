//! Forward kernels on plain tensors, plus the adjoint kernels the tape uses.
//!
//! Convolution goes through im2col and a dense GEMM. Results are
//! deterministic: everything here is single-threaded.

use crate::error::{Error, Result};

use super::{Shape, Tensor};

/// Slope and offset of the piecewise-linear gate activation.
pub const HARD_SIGMOID_SLOPE: f64 = 0.2;
pub const HARD_SIGMOID_OFFSET: f64 = 0.5;

#[inline]
pub fn hard_sigmoid_scalar(x: f64) -> f64 {
    (HARD_SIGMOID_SLOPE * x + HARD_SIGMOID_OFFSET).clamp(0.0, 1.0)
}

/// `c = a * b + beta * c` for row-major operands described by element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || last(m, k, a_strides) < a.len());
    assert!(k == 0 || last(k, n, b_strides) < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches, and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Range of output columns `x` whose source column `x + offset` lies in `[0, width)`.
#[inline]
fn valid_range(width: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).clamp(0, width as isize) as usize;
    let hi = (width as isize - offset).clamp(0, width as isize) as usize;
    (lo, hi.max(lo))
}

fn im2col(src: &[f64], ci: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [f64]) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    for c in 0..ci {
        let plane = &src[c * hw..(c + 1) * hw];
        for dy in 0..kh {
            let oy = dy as isize - ph;
            for dx in 0..kw {
                let ox = dx as isize - pw;
                let (x_lo, x_hi) = valid_range(w, ox);
                let row = ((c * kh + dy) * kw + dx) * hw;
                let dst = &mut col[row..row + hw];
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize || x_lo == x_hi {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x_lo].fill(0.0);
                    drow[x_hi..].fill(0.0);
                    let s_lo = (x_lo as isize + ox) as usize;
                    drow[x_lo..x_hi].copy_from_slice(&srow[s_lo..s_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], ci: usize, h: usize, w: usize, kh: usize, kw: usize, dst: &mut [f64]) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut dst[c * hw..(c + 1) * hw];
        for dy in 0..kh {
            let oy = dy as isize - ph;
            for dx in 0..kw {
                let ox = dx as isize - pw;
                let (x_lo, x_hi) = valid_range(w, ox);
                if x_lo == x_hi {
                    continue;
                }
                let row = ((c * kh + dy) * kw + dx) * hw;
                let srcrow = &col[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s_lo = (x_lo as isize + ox) as usize;
                    let target = &mut plane[sy as usize * w + s_lo..sy as usize * w + s_lo + (x_hi - x_lo)];
                    for (t, v) in target.iter_mut().zip(&srcrow[y * w + x_lo..y * w + x_hi]) {
                        *t += v;
                    }
                }
            }
        }
    }
}

fn check_conv(input: Shape, kernel: Shape, bias: Option<Shape>) -> Result<()> {
    if kernel.h % 2 == 0 || kernel.w % 2 == 0 {
        return Err(Error::UnsupportedKernel {
            kh: kernel.h,
            kw: kernel.w,
        });
    }
    if input.c != kernel.c {
        return Err(Error::shape(format!(
            "conv2d: input {input} has {} channels but kernel {kernel} expects {}",
            input.c, kernel.c
        )));
    }
    if let Some(b) = bias {
        if b != Shape::bias(kernel.n) {
            return Err(Error::shape(format!(
                "conv2d: bias {b} does not match {} output channels",
                kernel.n
            )));
        }
    }
    Ok(())
}

/// Zero-padded "same" convolution (cross-correlation) with stride 1.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (is, ks) = (input.shape(), kernel.shape());
    check_conv(is, ks, bias.map(Tensor::shape))?;
    let (co, ci, kh, kw) = (ks.n, ks.c, ks.h, ks.w);
    let hw = is.plane();
    let kdim = ci * kh * kw;
    let point = kh == 1 && kw == 1;
    let mut out = Tensor::zeros(Shape::new(is.n, co, is.h, is.w));
    let mut col = if point { Vec::new() } else { vec![0.0; kdim * hw] };
    for n in 0..is.n {
        let src = &input.data()[n * ci * hw..(n + 1) * ci * hw];
        let b: &[f64] = if point {
            src
        } else {
            im2col(src, ci, is.h, is.w, kh, kw, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[n * co * hw..(n + 1) * co * hw];
        if let Some(bias) = bias {
            for (o, plane) in dst.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias.data()[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(co, kdim, hw, kernel.data(), (kdim, 1), b, (hw, 1), beta, dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (is, ks) = (input.shape(), kernel.shape());
    let (co, ci, kh, kw) = (ks.n, ks.c, ks.h, ks.w);
    let hw = is.plane();
    let kdim = ci * kh * kw;
    let point = kh == 1 && kw == 1;
    let (want_input, want_kernel, want_bias) = want;

    let mut gin = want_input.then(|| input.zeros_like());
    let mut gk = want_kernel.then(|| kernel.zeros_like());
    let mut gb = want_bias.then(|| Tensor::zeros(Shape::bias(co)));
    let mut col = if point || !want_kernel { Vec::new() } else { vec![0.0; kdim * hw] };
    let mut dcol = if point || !want_input { Vec::new() } else { vec![0.0; kdim * hw] };

    for n in 0..is.n {
        let go = &grad_out.data()[n * co * hw..(n + 1) * co * hw];
        if let Some(gb) = gb.as_mut() {
            for (o, plane) in go.chunks_exact(hw).enumerate() {
                gb.data_mut()[o] += plane.iter().sum::<f64>();
            }
        }
        if let Some(gk) = gk.as_mut() {
            let src = &input.data()[n * ci * hw..(n + 1) * ci * hw];
            let b: &[f64] = if point {
                src
            } else {
                im2col(src, ci, is.h, is.w, kh, kw, &mut col);
                &col
            };
            // dK (co x kdim) += dOut (co x hw) * col^T (hw x kdim)
            gemm(co, hw, kdim, go, (hw, 1), b, (1, hw), 1.0, gk.data_mut());
        }
        if let Some(gin) = gin.as_mut() {
            let dst = &mut gin.data_mut()[n * ci * hw..(n + 1) * ci * hw];
            // dcol (kdim x hw) = K^T (kdim x co) * dOut (co x hw)
            if point {
                gemm(kdim, co, hw, kernel.data(), (1, kdim), go, (hw, 1), 1.0, dst);
            } else {
                gemm(kdim, co, hw, kernel.data(), (1, kdim), go, (hw, 1), 0.0, &mut dcol);
                col2im_add(&dcol, ci, is.h, is.w, kh, kw, dst);
            }
        }
    }
    ConvGrads {
        input: gin,
        kernel: gk,
        bias: gb,
    }
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns get shrunk windows.
///
/// Also returns, for each output element, the flat input index of its maximum
/// (first occurrence in row-major window order).
pub fn max_pool_2x2_with_argmax(input: &Tensor) -> (Tensor, Vec<usize>) {
    let s = input.shape();
    let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0usize; os.len()];
    let src = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = s.index(n, c, 2 * oy, 2 * ox);
                    for y in 2 * oy..(2 * oy + 2).min(s.h) {
                        for x in 2 * ox..(2 * ox + 2).min(s.w) {
                            let i = s.index(n, c, y, x);
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = os.index(n, c, oy, ox);
                    out.data_mut()[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_2x2(input: &Tensor) -> Tensor {
    max_pool_2x2_with_argmax(input).0
}

/// Nearest-neighbour 2x upsampling: every pixel fills a 2x2 block.
pub fn upsample_2x(input: &Tensor) -> Tensor {
    let s = input.shape();
    let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros(os);
    for nc in 0..s.n * s.c {
        for y in 0..os.h {
            for x in 0..os.w {
                out.data_mut()[(nc * os.h + y) * os.w + x] = input.data()[(nc * s.h + y / 2) * s.w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_2x_backward(grad_out: &Tensor, input_shape: Shape) -> Tensor {
    let os = grad_out.shape();
    let mut g = Tensor::zeros(input_shape);
    for nc in 0..input_shape.n * input_shape.c {
        for y in 0..os.h {
            for x in 0..os.w {
                g.data_mut()[(nc * input_shape.h + y / 2) * input_shape.w + x / 2] +=
                    grad_out.data()[(nc * os.h + y) * os.w + x];
            }
        }
    }
    g
}

/// Keeps the top-left `h x w` window of every plane.
pub fn crop(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = input.shape();
    if h == 0 || w == 0 || h > s.h || w > s.w {
        return Err(Error::shape(format!("cannot crop {s} to {h}x{w}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |[n, c, y, x]| {
        input.at(n, c, y, x)
    }))
}

/// Concatenation along axis 0 (batch / output channels of a kernel) or axis 1 (channels).
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    match axis {
        0 => {
            for p in parts {
                let s = p.shape();
                if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                    return Err(Error::shape(format!("concat axis 0: {s} vs {first}")));
                }
            }
            let n = parts.iter().map(|p| p.shape().n).sum();
            let mut data = Vec::with_capacity(n * first.c * first.plane());
            for p in parts {
                data.extend_from_slice(p.data());
            }
            Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
        }
        1 => {
            for p in parts {
                let s = p.shape();
                if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                    return Err(Error::shape(format!("concat_channels: {s} vs {first}")));
                }
            }
            let c = parts.iter().map(|p| p.shape().c).sum();
            let mut data = Vec::with_capacity(first.n * c * first.plane());
            for n in 0..first.n {
                for p in parts {
                    let block = p.shape().c * first.plane();
                    data.extend_from_slice(&p.data()[n * block..(n + 1) * block]);
                }
            }
            Tensor::from_vec(Shape::new(first.n, c, first.h, first.w), data)
        }
        _ => Err(Error::shape(format!("concat axis {axis} not supported"))),
    }
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    concat(parts, 1)
}

pub fn slice_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = input.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::shape(format!(
            "channel slice {start}..{} out of range for {s}",
            start + len
        )));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let base = (n * s.c + start) * plane;
        data.extend_from_slice(&input.data()[base..base + len * plane]);
    }
    Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), data)
}

fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {} vs {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "hadamard", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn hard_sigmoid(a: &Tensor) -> Tensor {
    a.map(hard_sigmoid_scalar)
}
