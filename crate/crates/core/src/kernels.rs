//! Raw slice kernels behind the differentiable ops.
//!
//! All planes are row-major. Convolutions are stride-1 cross-correlations
//! with symmetric zero padding; output planes keep the input's size when
//! `pad == (k - 1) / 2`.

use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn kernel_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Whole output rows per im2col tile.
    fn tile_rows(&self) -> usize {
        (TILE_ELEMS / (self.kernel_len() * self.width).max(1)).clamp(1, self.height)
    }
}

/// Upper bound on the im2col buffer size in elements.
const TILE_ELEMS: usize = 1 << 18;

/// Valid output-x range `[lo, hi)` for horizontal tap offset `dx`.
fn valid_span(width: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).clamp(0, width as isize) as usize;
    let hi = (width as isize - dx).clamp(0, width as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds the receptive fields of output rows `y0..y1` into a
/// `kernel_len × pixels` row-major matrix.
fn im2col(d: &ConvDims, input: &[f32], y0: usize, y1: usize, col: &mut [f32]) {
    let (w, k, pad) = (d.width, d.kernel, d.pad as isize);
    let n = (y1 - y0) * w;
    for c in 0..d.in_channels {
        let src = &input[c * d.plane()..(c + 1) * d.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * n..][..n];
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                for (y, out) in (y0..y1).zip(row.chunks_mut(w)) {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= d.height as isize || lo == hi {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[sy as usize * w..][..w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    out[lo..hi].copy_from_slice(&line[s0..s0 + hi - lo]);
                }
            }
        }
    }
}

/// Scatter-adds an unfolded gradient of rows `y0..y1` back onto the input
/// planes it came from.
fn col2im(d: &ConvDims, col: &[f32], y0: usize, y1: usize, planes: &mut [f32]) {
    let (w, k, pad) = (d.width, d.kernel, d.pad as isize);
    let n = (y1 - y0) * w;
    for (ci, dst) in planes.chunks_mut(d.plane()).enumerate() {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                for (y, g) in (y0..y1).zip(row.chunks(w)) {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= d.height as isize {
                        continue;
                    }
                    let s0 = (lo as isize + dx) as usize;
                    let line = &mut dst[sy as usize * w + s0..][..hi - lo];
                    for (t, v) in line.iter_mut().zip(&g[lo..hi]) {
                        *t += v;
                    }
                }
            }
        }
    }
}

/// `C[m×n] = A[m×k] · B[k×n] + beta · C` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a_strides;
    let (rsb, csb) = b_strides;
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Output channels per parallel task.
fn block_len(total: usize) -> usize {
    total.div_ceil(parallel::current_threads().max(1)).max(1)
}

/// Output channels `o0..o0 + block.len() / plane` of the convolution.
fn conv_block(d: &ConvDims, input: &[f32], weight: &[f32], bias: Option<&[f32]>, o0: usize, block: &mut [f32]) {
    let plane = d.plane();
    let ob = block.len() / plane;
    let kl = d.kernel_len();
    for (j, p) in block.chunks_mut(plane).enumerate() {
        p.fill(bias.map_or(0.0, |b| b[o0 + j]));
    }
    let rows = d.tile_rows();
    let mut col = vec![0.0f32; kl * rows * d.width];
    for y0 in (0..d.height).step_by(rows) {
        let y1 = (y0 + rows).min(d.height);
        let (p0, p1) = (y0 * d.width, y1 * d.width);
        let n = p1 - p0;
        im2col(d, input, y0, y1, &mut col);
        gemm(
            ob,
            kl,
            n,
            &weight[o0 * kl..],
            (kl, 1),
            &col,
            (n, 1),
            1.0,
            &mut block[p0..],
            plane,
        );
    }
}

/// Convolution forward pass, parallel over blocks of output channels.
pub fn conv2d_forward(d: &ConvDims, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0f32; d.out_channels * d.plane()];
    let ob = block_len(d.out_channels);
    parallel::for_each_chunk(&mut out, ob * d.plane(), |i, block| {
        conv_block(d, input, weight, bias, i * ob, block)
    });
    out
}

/// Single-threaded convolution forward pass.
pub fn conv2d_forward_seq(d: &ConvDims, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0f32; d.out_channels * d.plane()];
    conv_block(d, input, weight, bias, 0, &mut out);
    out
}

/// Gradient with respect to the convolution input, parallel over blocks
/// of input channels.
pub fn conv2d_backward_input(d: &ConvDims, grad_out: &[f32], weight: &[f32]) -> Vec<f32> {
    let plane = d.plane();
    let kk = d.kernel * d.kernel;
    let kl = d.kernel_len();
    let mut gin = vec![0.0f32; d.in_channels * plane];
    let cb = block_len(d.in_channels);
    let rows = d.tile_rows();
    parallel::for_each_chunk(&mut gin, cb * plane, |i, block| {
        let c0 = i * cb;
        let m = (block.len() / plane) * kk;
        let mut col = vec![0.0f32; m * rows * d.width];
        for y0 in (0..d.height).step_by(rows) {
            let y1 = (y0 + rows).min(d.height);
            let (p0, p1) = (y0 * d.width, y1 * d.width);
            let n = p1 - p0;
            // col = W[:, c0 block]^T · G[:, p0..p1]
            gemm(
                m,
                d.out_channels,
                n,
                &weight[c0 * kk..],
                (1, kl),
                &grad_out[p0..],
                (plane, 1),
                0.0,
                &mut col,
                n,
            );
            col2im(d, &col, y0, y1, block);
        }
    });
    gin
}

/// Gradient with respect to the weights, parallel over blocks of output channels.
pub fn conv2d_backward_weight(d: &ConvDims, grad_out: &[f32], input: &[f32]) -> Vec<f32> {
    let plane = d.plane();
    let kl = d.kernel_len();
    let mut gw = vec![0.0f32; d.out_channels * kl];
    let ob = block_len(d.out_channels);
    let rows = d.tile_rows();
    parallel::for_each_chunk(&mut gw, ob * kl, |i, block| {
        let o0 = i * ob;
        let m = block.len() / kl;
        let mut col = vec![0.0f32; kl * rows * d.width];
        for y0 in (0..d.height).step_by(rows) {
            let y1 = (y0 + rows).min(d.height);
            let (p0, p1) = (y0 * d.width, y1 * d.width);
            let n = p1 - p0;
            im2col(d, input, y0, y1, &mut col);
            // gw[o block] += G[o block, p0..p1] · col^T
            gemm(
                m,
                n,
                kl,
                &grad_out[o0 * plane + p0..],
                (plane, 1),
                &col,
                (1, n),
                1.0,
                block,
                kl,
            );
        }
    });
    gw
}

pub fn conv2d_backward_bias(d: &ConvDims, grad_out: &[f32]) -> Vec<f32> {
    grad_out.chunks(d.plane()).map(|p| p.iter().sum()).collect()
}

/// 2×2 mean pooling of `channels` planes of size `h`×`w` (both even).
pub fn avg_pool2_forward(input: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; channels * oh * ow];
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            let r0 = &src[2 * y * w..2 * y * w + w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 1) * w + w];
            for x in 0..ow {
                dst[y * ow + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gin = vec![0.0f32; channels * h * w];
    for c in 0..channels {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut gin[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * g[(y / 2) * ow + x / 2];
            }
        }
    }
    gin
}

/// Source taps `(lo, hi, frac)` for ×2 bilinear resampling of an axis of
/// length `n`, half-pixel centres, edges clamped.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f32 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f32 };
            (lo, hi, frac)
        })
        .collect()
}

pub fn upsample_bilinear2_forward(input: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let mut out = vec![0.0f32; channels * oh * ow];
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear2_backward(grad_out: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let mut gin = vec![0.0f32; channels * h * w];
    for c in 0..channels {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut gin[c * h * w..(c + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[y * ow + x];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    gin
}

pub fn upsample_nearest_forward(input: &[f32], channels: usize, h: usize, w: usize, sy: usize, sx: usize) -> Vec<f32> {
    let (oh, ow) = (h * sy, w * sx);
    let mut out = vec![0.0f32; channels * oh * ow];
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / sy) * w + x / sx];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(
    grad_out: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    sy: usize,
    sx: usize,
) -> Vec<f32> {
    let (oh, ow) = (h * sy, w * sx);
    let mut gin = vec![0.0f32; channels * h * w];
    for c in 0..channels {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut gin[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / sy) * w + x / sx] += g[y * ow + x];
            }
        }
    }
    gin
}
