use super::{check_grad_shape, nchw, LayerCache, LayerParams, Stash};
use crate::error::{bail, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// `floor((extent + 2 * pad - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || extent + 2 * pad < kernel {
        return None;
    }
    Some((extent + 2 * pad - kernel) / stride + 1)
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unrolls one `[C, H, W]` sample into a `[C*k*k, OH*OW]` patch matrix.
fn im2col(input: &[f64], g: &Geometry, col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto a `[C, H, W]` gradient buffer.
fn col2im(col: &[f64], g: &Geometry, out: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(input_shape: &[usize], params: &LayerParams, stride: usize, pad: usize) -> Result<Geometry> {
    let (c, h, w) = (input_shape[1], input_shape[2], input_shape[3]);
    let ws = params.weights.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        bail!(Shape, "conv weights must be [O, C, k, k], got {ws:?}");
    }
    if ws[1] != c {
        bail!(Shape, "conv expects {} input channels, input has {c}", ws[1]);
    }
    if stride == 0 {
        bail!(Param, "conv stride must be >= 1");
    }
    let k = ws[2];
    let (Some(out_h), Some(out_w)) = (
        conv_output_extent(h, k, stride, pad),
        conv_output_extent(w, k, stride, pad),
    ) else {
        bail!(Shape, "{k}x{k} kernel with pad {pad} does not fit {h}x{w} input");
    };
    Ok(Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
        out_h,
        out_w,
    })
}

/// Cross-correlation of an `[N, C, H, W]` batch with `[O, C, k, k]` weights plus
/// a per-channel bias, computed as im2col followed by a matrix product.
pub fn conv2d_forward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
    cache: &mut LayerCache,
) -> Result<Tensor> {
    let (n, _, _, _) = nchw("conv2d", input)?;
    let g = geometry(input.shape(), params, stride, pad)?;
    let o = params.out_features();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let sample_in = g.channels * g.height * g.width;
    let sample_out = o * cols;

    let mut out = vec![0.0; n * sample_out];
    let mut col = vec![0.0; rows * cols];
    for (b, dst) in out.chunks_exact_mut(sample_out).enumerate() {
        im2col(&input.data()[b * sample_in..(b + 1) * sample_in], &g, &mut col);
        for (oc, plane) in dst.chunks_exact_mut(cols).enumerate() {
            plane.fill(params.bias.data()[oc]);
        }
        gemm(params.weights.data(), &col, dst, o, rows, cols);
    }
    let out_shape = vec![n, o, g.out_h, g.out_w];
    cache.put(Stash::Conv {
        input: input.clone(),
        out_shape: out_shape.clone(),
    });
    Tensor::new(out_shape, out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn conv2d_backward(
    grad_out: &Tensor,
    params: &LayerParams,
    cache: &mut LayerCache,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let Stash::Conv { input, out_shape } = cache.take("conv2d")? else {
        unreachable!()
    };
    check_grad_shape("conv2d", grad_out, &out_shape)?;
    let g = geometry(input.shape(), params, stride, pad)?;
    let n = input.shape()[0];
    let o = params.out_features();
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let sample_in = g.channels * g.height * g.width;
    let sample_out = o * cols;

    let mut grad_in = vec![0.0; input.len()];
    let mut grad_w = vec![0.0; params.weights.len()];
    let mut grad_b = vec![0.0; o];
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    for b in 0..n {
        let go = &grad_out.data()[b * sample_out..(b + 1) * sample_out];
        for (oc, plane) in go.chunks_exact(cols).enumerate() {
            grad_b[oc] += plane.iter().sum::<f64>();
        }
        im2col(&input.data()[b * sample_in..(b + 1) * sample_in], &g, &mut col);
        gemm_nt(go, &col, &mut grad_w, o, cols, rows);
        dcol.fill(0.0);
        gemm_tn(params.weights.data(), go, &mut dcol, rows, o, cols);
        col2im(&dcol, &g, &mut grad_in[b * sample_in..(b + 1) * sample_in]);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), grad_in)?,
        Tensor::new(params.weights.shape().to_vec(), grad_w)?,
        Tensor::new(vec![o], grad_b)?,
    ))
}
