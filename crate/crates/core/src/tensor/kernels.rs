//! Forward and backward loops for the tape primitives.
//!
//! Everything operates on flat row-major slices; shape checks happen in the
//! [`Tape`](super::Tape) wrappers. Reductions run in a fixed order so results
//! are reproducible bit for bit.

use super::gemm::{gemm, sgemm, Mat};

/// Geometry of a 2-D convolution over an `N×Cin×H×W` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }
}

/// Output columns `lo..hi` whose input column `ox + shift` lies in `0..width`.
fn valid_columns(ow: usize, width: usize, shift: isize) -> (usize, usize, isize) {
    let lo = (-shift).clamp(0, ow as isize) as usize;
    let hi = (width as isize - shift).clamp(lo as isize, ow as isize) as usize;
    (lo, hi, shift)
}

/// Patch matrix of output rows `oy0..oy1`: `Cin·k·k` rows, one column per
/// output pixel in the band.
fn im2col(g: &ConvGeometry, x: &[f32], oy0: usize, oy1: usize, col: &mut [f32]) {
    let (ow, k, p) = (g.out_width(), g.kernel, g.padding as isize);
    let plane = g.height * g.width;
    let span = (oy1 - oy0) * ow;
    for ci in 0..g.in_channels {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * span..(row + 1) * span];
                let (lo, hi, shift) = valid_columns(ow, g.width, kx as isize - p);
                for oy in oy0..oy1 {
                    let iy = oy as isize + ky as isize - p;
                    let line = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[lo..hi].copy_from_slice(&src_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                    line[hi..].fill(0.0);
                }
            }
        }
    }
}

/// Patch matrices are built for bands of output rows small enough to stay in cache.
const BAND_FLOATS: usize = 1 << 16;

fn band_rows(g: &ConvGeometry) -> usize {
    (BAND_FLOATS / (g.col_rows() * g.out_width()).max(1)).clamp(1, g.out_height().max(1))
}

fn col2im_add(g: &ConvGeometry, col: &[f32], dx: &mut [f32]) {
    let (oh, ow, k, p) = (g.out_height(), g.out_width(), g.kernel, g.padding as isize);
    let plane = g.height * g.width;
    for ci in 0..g.in_channels {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let (lo, hi, shift) = valid_columns(ow, g.width, kx as isize - p);
                    let d = &mut dst_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (o, &v) in d.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation plus per-channel bias. Returns the `N×Cout×H'×W'` output.
pub fn conv2d_forward(g: &ConvGeometry, x: &[f32], kernel: &[f32], bias: &[f32]) -> Vec<f32> {
    let (rows, cols, ow) = (g.col_rows(), g.col_cols(), g.out_width());
    let in_stride = g.in_channels * g.height * g.width;
    let out_stride = g.out_channels * cols;
    let mut out = vec![0.0f32; g.batch * out_stride];
    let band = band_rows(g);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * band * ow] };
    let kmat = Mat::new(kernel, rows, false);
    for n in 0..g.batch {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let on = &mut out[n * out_stride..(n + 1) * out_stride];
        for (co, chunk) in on.chunks_exact_mut(cols).enumerate() {
            chunk.fill(bias[co]);
        }
        for oy0 in (0..g.out_height()).step_by(band) {
            let oy1 = (oy0 + band).min(g.out_height());
            let span = (oy1 - oy0) * ow;
            let patches = if g.is_pointwise() {
                Mat::new(&xn[oy0 * ow..], cols, false)
            } else {
                im2col(g, xn, oy0, oy1, &mut col);
                Mat::new(&col, span, false)
            };
            gemm(g.out_channels, rows, span, kmat, patches, &mut on[oy0 * ow..], cols, 1.0);
        }
    }
    out
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f32],
    kernel: &[f32],
    dout: &[f32],
    want: [bool; 3],
) -> ConvGrads {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_stride = g.in_channels * g.height * g.width;
    let out_stride = g.out_channels * cols;
    let mut dx = want[0].then(|| vec![0.0f32; x.len()]);
    let mut db = want[2].then(|| vec![0.0f32; g.out_channels]);
    // the input gradient is a correlation of `dout` with the flipped,
    // channel-transposed kernel, computed for the whole batch at once
    let transposed = g.padding < g.kernel;
    if let (Some(dx), true) = (dx.as_mut(), transposed) {
        let k = g.kernel;
        let mut flipped = vec![0.0f32; kernel.len()];
        for co in 0..g.out_channels {
            for ci in 0..g.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        flipped[((ci * g.out_channels + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            kernel[((co * g.in_channels + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        let tg = ConvGeometry {
            batch: g.batch,
            in_channels: g.out_channels,
            out_channels: g.in_channels,
            height: g.out_height(),
            width: g.out_width(),
            kernel: k,
            padding: k - 1 - g.padding,
        };
        *dx = conv2d_forward(&tg, dout, &flipped, &vec![0.0; g.in_channels]);
    }
    let ow = g.out_width();
    let band = band_rows(g);
    let mut col = vec![0.0f32; if g.is_pointwise() { 0 } else { rows * band * ow }];
    let mut dk = want[1].then(|| vec![0.0f32; kernel.len()]);
    let mut dcol = vec![0.0f32; if dx.is_some() && !transposed { rows * cols } else { 0 }];
    let plane = g.height * g.width;
    for n in 0..g.batch {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let dn = &dout[n * out_stride..(n + 1) * out_stride];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dn.chunks_exact(cols).enumerate() {
                db[co] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(dk) = dk.as_mut() {
            // band-sized patch matrices keep the strided (transposed) packing in cache
            for oy0 in (0..g.out_height()).step_by(band) {
                let oy1 = (oy0 + band).min(g.out_height());
                let span = (oy1 - oy0) * ow;
                let dmat = Mat::new(&dn[oy0 * ow..], cols, false);
                let patches = if g.is_pointwise() {
                    Mat::new(&xn[oy0 * ow..], plane, true)
                } else {
                    im2col(g, xn, oy0, oy1, &mut col);
                    Mat::new(&col, span, true)
                };
                gemm(g.out_channels, span, rows, dmat, patches, dk, rows, 1.0);
            }
        }
        if let (Some(dx), false) = (dx.as_mut(), transposed) {
            let dxn = &mut dx[n * in_stride..(n + 1) * in_stride];
            sgemm(rows, g.out_channels, cols, kernel, true, dn, false, &mut dcol, 0.0);
            col2im_add(g, &dcol, dxn);
        }
    }
    ConvGrads { input: dx, kernel: dk, bias: db }
}

pub fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Passes gradient where the input was strictly positive; the subgradient at 0 is 0.
pub fn relu_backward(x: &[f32], dout: &[f32]) -> Vec<f32> {
    x.iter().zip(dout).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect()
}

/// 2×2 average pooling over `planes` planes of `h×w` (both even).
pub fn avgpool2_forward(planes: usize, h: usize, w: usize, x: &[f32]) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let c = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = ((a + b) + (c + d)) * 0.25;
            }
        }
    }
    out
}

pub fn avgpool2_backward(planes: usize, h: usize, w: usize, dout: &[f32]) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * 0.25;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling of `planes` planes of `h×w`.
pub fn upsample2_forward(planes: usize, h: usize, w: usize, x: &[f32]) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(planes: usize, h: usize, w: usize, dout: &[f32]) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let a = src[2 * y * ow + 2 * xx];
                let b = src[2 * y * ow + 2 * xx + 1];
                let c = src[(2 * y + 1) * ow + 2 * xx];
                let d = src[(2 * y + 1) * ow + 2 * xx + 1];
                dst[y * w + xx] = (a + b) + (c + d);
            }
        }
    }
    dx
}

/// Numerically stable softmax over the channel axis of an `N×C×H×W` buffer.
pub fn softmax_channels(n: usize, c: usize, plane: usize, z: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; z.len()];
    for b in 0..n {
        let base = b * c * plane;
        for j in 0..plane {
            let mut max = f32::NEG_INFINITY;
            for k in 0..c {
                max = max.max(z[base + k * plane + j]);
            }
            let mut denom = 0.0f64;
            for k in 0..c {
                denom += ((z[base + k * plane + j] - max) as f64).exp();
            }
            for k in 0..c {
                let e = ((z[base + k * plane + j] - max) as f64).exp();
                out[base + k * plane + j] = (e / denom) as f32;
            }
        }
    }
    out
}

/// Log-softmax of one pixel's logits, evaluated in `f64`.
pub fn log_softmax_pixel(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Per-pixel sampling taps for warping one `h×w` plane.
///
/// Each output pixel reads up to four input pixels with fixed weights, or is
/// marked invalid and receives the fill value.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpPlan {
    pub height: usize,
    pub width: usize,
    pub taps: Vec<[u32; 4]>,
    pub weights: Vec<[f32; 4]>,
    pub valid: Vec<bool>,
}

impl WarpPlan {
    pub fn apply(&self, src: &[f32], fill: f32, dst: &mut [f32]) {
        for (j, out) in dst.iter_mut().enumerate() {
            *out = if self.valid[j] {
                let t = &self.taps[j];
                let w = &self.weights[j];
                ((w[0] * src[t[0] as usize] + w[1] * src[t[1] as usize])
                    + w[2] * src[t[2] as usize])
                    + w[3] * src[t[3] as usize]
            } else {
                fill
            };
        }
    }

    pub fn apply_transpose_add(&self, dout: &[f32], dsrc: &mut [f32]) {
        for (j, &d) in dout.iter().enumerate() {
            if self.valid[j] {
                let t = &self.taps[j];
                let w = &self.weights[j];
                for q in 0..4 {
                    dsrc[t[q] as usize] += w[q] * d;
                }
            }
        }
    }
}
