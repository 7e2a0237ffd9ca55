//! Strided 2D cross-correlation and its adjoint (transposed convolution).
//!
//! Both are lowered to a single matrix product over the whole batch via
//! patch unrolling. Tensors are laid out `[batch, channel, height, width]`;
//! kernels are `[out, in, k, k]` for convolution and `[in, out, k, k]` for
//! the transposed operator, so a shared weight tensor makes the two exact
//! adjoints of each other.

use super::gemm::gemm;
use crate::autodiff::{Backward, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero-pad so the output extent is `ceil(input / stride)`; any odd
    /// padding pixel goes to the bottom/right.
    Same,
    /// No padding.
    Valid,
}

/// Spatial bookkeeping of a convolution from `(h, w)` to `(h_out, w_out)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
    }
}

impl ConvGeometry {
    pub fn forward(h: usize, w: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if h == 0 || w == 0 || kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv geometry needs positive extents, got {h}x{w}, kernel {kernel}, stride {stride}"
            )));
        }
        let (Some((h_out, pad_top)), Some((w_out, pad_left))) = (
            out_extent(h, kernel, stride, padding),
            out_extent(w, kernel, stride, padding),
        ) else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("{h}x{w} input is smaller than the {kernel}x{kernel} kernel under Valid padding"),
            });
        };
        Ok(Self {
            h,
            w,
            kernel,
            stride,
            h_out,
            w_out,
            pad_top,
            pad_left,
        })
    }

    /// Geometry of the convolution whose adjoint maps `(h, w)` up to the
    /// transposed-convolution output.
    pub fn transposed(h: usize, w: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if h == 0 || w == 0 || kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "transposed conv geometry needs positive extents, got {h}x{w}"
            )));
        }
        let (big_h, big_w) = match padding {
            Padding::Same => (h * stride, w * stride),
            Padding::Valid => ((h - 1) * stride + kernel, (w - 1) * stride + kernel),
        };
        let g = Self::forward(big_h, big_w, kernel, stride, padding)?;
        debug_assert_eq!((g.h_out, g.w_out), (h, w));
        Ok(g)
    }

    fn patch(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unrolls `[B, C, h, w]` into `[C·k·k, B·h_out·w_out]` columns.
fn im2col(x: &[f64], batch: usize, channels: usize, g: &ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let p = g.patch();
    let n = batch * p;
    let mut cols = vec![0.0; channels * k * k * n];
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for b in 0..batch {
                    let plane = &x[(b * channels + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[row + b * p..row + (b + 1) * p];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[B, C, h, w]`.
fn col2im(cols: &[f64], batch: usize, channels: usize, g: &ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let p = g.patch();
    let n = batch * p;
    let mut x = vec![0.0; batch * channels * g.h * g.w];
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for b in 0..batch {
                    let plane = &mut x[(b * channels + c) * g.h * g.w..][..g.h * g.w];
                    let src = &cols[row + b * p..row + (b + 1) * p];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += src[oy * g.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, P]` → `[C, B·P]`.
fn to_channel_major(x: &[f64], batch: usize, channels: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(c * batch + b) * p..][..p].copy_from_slice(&x[(b * channels + c) * p..][..p]);
        }
    }
    out
}

/// `[C, B·P]` → `[B, C, P]`.
fn to_batch_major(x: &[f64], batch: usize, channels: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(b * channels + c) * p..][..p].copy_from_slice(&x[(c * batch + b) * p..][..p]);
        }
    }
    out
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], batch: usize, p: usize) {
    let channels = bias.len();
    for b in 0..batch {
        for (c, &bc) in bias.iter().enumerate() {
            for v in &mut y[(b * channels + c) * p..][..p] {
                *v += bc;
            }
        }
    }
}

fn channel_sums(g: &[f64], batch: usize, channels: usize, p: usize) -> Vec<f64> {
    let mut sums = vec![0.0; channels];
    for b in 0..batch {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += g[(b * channels + c) * p..][..p].iter().sum::<f64>();
        }
    }
    sums
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| Error::InvalidShape {
        op,
        detail: format!("expected [batch, channel, height, width], got {shape:?}"),
    })
}

fn check_kernel(op: &'static str, weight: &[usize], bias: &[usize], in_channels: usize, transposed: bool) -> Result<[usize; 4]> {
    let w = dims4(op, weight)?;
    let (w_in, w_out) = if transposed { (w[0], w[1]) } else { (w[1], w[0]) };
    if w[2] != w[3] {
        return Err(Error::InvalidShape {
            op,
            detail: format!("kernel must be square, got {weight:?}"),
        });
    }
    if w_in != in_channels {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![in_channels],
            rhs: weight.to_vec(),
        });
    }
    if bias != [w_out] {
        return Err(Error::shape(op, weight, bias));
    }
    Ok(w)
}

/// Cross-correlation of `x` (`[B, C, H, W]`) with `weight` (`[F, C, k, k]`).
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>, stride: usize, padding: Padding) -> Result<Var<'t>> {
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let [batch, channels, h, w] = dims4("conv2d", xv.shape())?;
    let [filters, _, k, _] = check_kernel("conv2d", wv.shape(), bv.shape(), channels, false)?;
    let g = ConvGeometry::forward(h, w, k, stride, padding)?;
    let p = g.patch();
    let n = batch * p;
    let ckk = channels * k * k;

    let cols = im2col(xv.data(), batch, channels, &g);
    let mut out_mat = vec![0.0; filters * n];
    gemm(filters, ckk, n, wv.data(), false, &cols, false, &mut out_mat, 0.0);
    let mut y = to_batch_major(&out_mat, batch, filters, p);
    add_channel_bias(&mut y, bv.data(), batch, p);
    let out = Tensor::from_parts(vec![batch, filters, g.h_out, g.w_out], y);

    Ok(x.tape().record(
        out,
        &[x, weight, bias],
        Box::new(move |ctx: &Backward<'_>| {
            let dmat = to_channel_major(ctx.grad.data(), batch, filters, p);
            let dx = ctx.needs[0].then(|| {
                let mut dcols = vec![0.0; ckk * n];
                gemm(ckk, filters, n, ctx.inputs[1].data(), true, &dmat, false, &mut dcols, 0.0);
                Tensor::from_parts(vec![batch, channels, h, w], col2im(&dcols, batch, channels, &g))
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![0.0; filters * ckk];
                gemm(filters, n, ckk, &dmat, false, &cols, true, &mut dw, 0.0);
                Tensor::from_parts(vec![filters, channels, k, k], dw)
            });
            let db = ctx.needs[2]
                .then(|| Tensor::from_vec(channel_sums(ctx.grad.data(), batch, filters, p)));
            vec![dx, dw, db]
        }),
    ))
}

/// Transposed convolution of `x` (`[B, C, h, w]`) with `weight`
/// (`[C, F, k, k]`): the adjoint of [`conv2d`] with the same weights, plus bias.
pub fn transp_conv2d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
    stride: usize,
    padding: Padding,
) -> Result<Var<'t>> {
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let [batch, channels, h, w] = dims4("transp_conv2d", xv.shape())?;
    let [_, filters, k, _] = check_kernel("transp_conv2d", wv.shape(), bv.shape(), channels, true)?;
    let g = ConvGeometry::transposed(h, w, k, stride, padding)?;
    let p = g.patch();
    let n = batch * p;
    let fkk = filters * k * k;

    let xmat = to_channel_major(xv.data(), batch, channels, p);
    let mut cols = vec![0.0; fkk * n];
    gemm(fkk, channels, n, wv.data(), true, &xmat, false, &mut cols, 0.0);
    let mut y = col2im(&cols, batch, filters, &g);
    add_channel_bias(&mut y, bv.data(), batch, g.h * g.w);
    let out = Tensor::from_parts(vec![batch, filters, g.h, g.w], y);

    Ok(x.tape().record(
        out,
        &[x, weight, bias],
        Box::new(move |ctx: &Backward<'_>| {
            let need_cols = ctx.needs[0] || ctx.needs[1];
            let dcols = need_cols.then(|| im2col(ctx.grad.data(), batch, filters, &g));
            let dx = ctx.needs[0].then(|| {
                let dcols = dcols.as_ref().expect("unrolled gradient");
                let mut dxmat = vec![0.0; channels * n];
                gemm(channels, fkk, n, ctx.inputs[1].data(), false, dcols, false, &mut dxmat, 0.0);
                Tensor::from_parts(vec![batch, channels, h, w], to_batch_major(&dxmat, batch, channels, p))
            });
            let dw = ctx.needs[1].then(|| {
                let dcols = dcols.as_ref().expect("unrolled gradient");
                let mut dw = vec![0.0; channels * fkk];
                gemm(channels, n, fkk, &xmat, false, dcols, true, &mut dw, 0.0);
                Tensor::from_parts(vec![channels, filters, k, k], dw)
            });
            let db = ctx.needs[2].then(|| {
                Tensor::from_vec(channel_sums(ctx.grad.data(), batch, filters, g.h * g.w))
            });
            vec![dx, dw, db]
        }),
    ))
}
