//! Raw numeric kernels used by the tape ops. Everything here works on flat
//! row-major slices and is single-threaded, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::PoolKind;

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m×k` and
/// `op(b)` of shape `k×n`. `ta`/`tb` select the transposed reading of the
/// stored row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given strides lies inside the corresponding slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected 4-D input and kernel, got {input:?} and {kernel:?}"),
            ));
        }
        if input[1] != kernel[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, kernel expects {}", input[1], kernel[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if h < kernel[2] || w < kernel[3] {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {h}x{w}",
                    kernel[2], kernel[3]
                ),
            ));
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h: (h - kernel[2]) / stride + 1,
            out_w: (w - kernel[3]) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, OH*OW]`.
fn im2col(g: &ConvGeometry, img: &[f64], col: &mut [f64]) {
    let ohw = g.out_len();
    let p = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - p;
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

/// Scatter-adds `[C*kh*kw, OH*OW]` back onto an image gradient `[C, H, W]`.
fn col2im(g: &ConvGeometry, col: &[f64], img: &mut [f64]) {
    let ohw = g.out_len();
    let p = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation. Returns the output and the unfolded columns
/// (kept for the backward pass).
pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let (pk, ohw) = (g.patch_len(), g.out_len());
    let img_len = g.in_channels * g.height * g.width;
    let mut cols = vec![0.0; g.batch * pk * ohw];
    let mut out = vec![0.0; g.batch * g.filters * ohw];
    for n in 0..g.batch {
        let col = &mut cols[n * pk * ohw..(n + 1) * pk * ohw];
        im2col(g, &input[n * img_len..(n + 1) * img_len], col);
        let dst = &mut out[n * g.filters * ohw..(n + 1) * g.filters * ohw];
        if let Some(b) = bias {
            for (f, row) in dst.chunks_mut(ohw).enumerate() {
                row.fill(b[f]);
            }
            gemm(g.filters, pk, ohw, kernel, false, col, false, 1.0, dst);
        } else {
            gemm(g.filters, pk, ohw, kernel, false, col, false, 0.0, dst);
        }
    }
    (out, cols)
}

/// Gradients of the cross-correlation: `(d_input, d_kernel, d_bias)`; each
/// is computed only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    kernel: &[f64],
    cols: &[f64],
    grad_out: &[f64],
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (pk, ohw) = (g.patch_len(), g.out_len());
    let img_len = g.in_channels * g.height * g.width;
    let mut d_in = want.0.then(|| vec![0.0; g.batch * img_len]);
    let mut d_k = want.1.then(|| vec![0.0; g.filters * pk]);
    let mut d_b = want.2.then(|| vec![0.0; g.filters]);
    let mut dcol = vec![0.0; if want.0 { pk * ohw } else { 0 }];
    for n in 0..g.batch {
        let go = &grad_out[n * g.filters * ohw..(n + 1) * g.filters * ohw];
        let col = &cols[n * pk * ohw..(n + 1) * pk * ohw];
        if let Some(dk) = d_k.as_mut() {
            gemm(g.filters, ohw, pk, go, false, col, true, 1.0, dk);
        }
        if let Some(db) = d_b.as_mut() {
            for (f, row) in go.chunks(ohw).enumerate() {
                db[f] += row.iter().sum::<f64>();
            }
        }
        if let Some(di) = d_in.as_mut() {
            gemm(pk, g.filters, ohw, kernel, true, go, false, 0.0, &mut dcol);
            col2im(g, &dcol, &mut di[n * img_len..(n + 1) * img_len]);
        }
    }
    (d_in, d_k, d_b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::dim("pool2d", format!("expected 4-D input, got {input:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::dim("pool2d", "window and stride must be positive"));
        }
        if window > input[2] || window > input[3] {
            return Err(Error::dim(
                "pool2d",
                format!("window {window} larger than input {}x{}", input[2], input[3]),
            ));
        }
        Ok(PoolGeometry {
            batch: input[0],
            channels: input[1],
            height: input[2],
            width: input[3],
            window,
            stride,
            out_h: (input[2] - window) / stride + 1,
            out_w: (input[3] - window) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.out_h, self.out_w]
    }
}

/// Pooled output plus, for max pooling, the flat input index chosen for
/// each output cell. Ties go to the lowest flat index.
pub(crate) fn pool2d_forward(g: &PoolGeometry, kind: PoolKind, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let (hw, ohw) = (g.height * g.width, g.out_h * g.out_w);
    let mut out = vec![0.0; planes * ohw];
    let mut argmax = if kind == PoolKind::Max {
        vec![0usize; planes * ohw]
    } else {
        Vec::new()
    };
    let inv = 1.0 / (g.window * g.window) as f64;
    for p in 0..planes {
        let plane = &input[p * hw..(p + 1) * hw];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = p * ohw + oy * g.out_w + ox;
                let (y0, x0) = (oy * g.stride, ox * g.stride);
                match kind {
                    PoolKind::Max => {
                        let mut best = y0 * g.width + x0;
                        for y in y0..y0 + g.window {
                            for x in x0..x0 + g.window {
                                let i = y * g.width + x;
                                if plane[i] > plane[best] {
                                    best = i;
                                }
                            }
                        }
                        out[o] = plane[best];
                        argmax[o] = p * hw + best;
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0;
                        for y in y0..y0 + g.window {
                            for x in x0..x0 + g.window {
                                s += plane[y * g.width + x];
                            }
                        }
                        out[o] = s * inv;
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn pool2d_backward(
    g: &PoolGeometry,
    kind: PoolKind,
    argmax: &[usize],
    grad_out: &[f64],
) -> Vec<f64> {
    let planes = g.batch * g.channels;
    let (hw, ohw) = (g.height * g.width, g.out_h * g.out_w);
    let mut d = vec![0.0; planes * hw];
    match kind {
        PoolKind::Max => {
            for (o, &i) in argmax.iter().enumerate() {
                d[i] += grad_out[o];
            }
        }
        PoolKind::Avg => {
            let inv = 1.0 / (g.window * g.window) as f64;
            for p in 0..planes {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let go = grad_out[p * ohw + oy * g.out_w + ox] * inv;
                        for y in oy * g.stride..oy * g.stride + g.window {
                            for x in ox * g.stride..ox * g.stride + g.window {
                                d[p * hw + y * g.width + x] += go;
                            }
                        }
                    }
                }
            }
        }
    }
    d
}
