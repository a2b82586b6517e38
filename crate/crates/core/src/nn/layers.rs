//! Forward and backward kernels for the layer types used by the autoencoder.
//!
//! Convolution weights are stored `(out, in, k, k)`; transposed-convolution
//! weights `(out, in, 3, 3)` as well. All spatial convolutions use "same"
//! zero padding and stride 1.

use super::tensor::Tensor4;
use crate::linalg::{gemm, gemm_at, gemm_bt};
use rayon::prelude::*;

fn im2col(item: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let src = &item[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * hw..][..hw];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    out.fill(0.0);
    for ci in 0..c {
        let dst = &mut out[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * hw..][..hw];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            drow[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(
    x: &Tensor4,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_ch: usize,
    k: usize,
) -> Tensor4 {
    let (c, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let ck = c * k * k;
    debug_assert_eq!(weight.len(), out_ch * ck);
    let mut y = Tensor4::zeros(x.n, out_ch, h, w);
    y.data
        .par_chunks_mut(out_ch * hw)
        .enumerate()
        .for_each(|(i, out)| {
            let item = x.item(i);
            if k == 1 {
                gemm(out_ch, ck, hw, 1.0, weight, item, 0.0, out);
            } else {
                let mut col = vec![0.0; ck * hw];
                im2col(item, c, h, w, k, &mut col);
                gemm(out_ch, ck, hw, 1.0, weight, &col, 0.0, out);
            }
            if let Some(b) = bias {
                for (o, plane) in out.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[o]);
                }
            }
        });
    y
}

/// Returns `(dx, dweight, dbias)`; `dbias` is empty when the layer has none.
pub(crate) fn conv_backward(
    x: &Tensor4,
    dy: &Tensor4,
    weight: &[f64],
    k: usize,
    has_bias: bool,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let (c, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let ck = c * k * k;
    let out_ch = dy.c;
    let mut dx = Tensor4::zeros(x.n, c, h, w);
    let mut dw = vec![0.0; out_ch * ck];
    let mut col = vec![0.0; ck * hw];
    let mut dcol = vec![0.0; ck * hw];
    for i in 0..x.n {
        let g = dy.item(i);
        if k == 1 {
            gemm_bt(out_ch, hw, ck, 1.0, g, x.item(i), 1.0, &mut dw);
            gemm_at(ck, out_ch, hw, 1.0, weight, g, 0.0, dx.item_mut(i));
        } else {
            im2col(x.item(i), c, h, w, k, &mut col);
            gemm_bt(out_ch, hw, ck, 1.0, g, &col, 1.0, &mut dw);
            gemm_at(ck, out_ch, hw, 1.0, weight, g, 0.0, &mut dcol);
            col2im(&dcol, c, h, w, k, dx.item_mut(i));
        }
    }
    let db = if has_bias {
        let mut db = vec![0.0; out_ch];
        for i in 0..dy.n {
            for (o, plane) in dy.item(i).chunks(hw).enumerate() {
                db[o] += plane.iter().sum::<f64>();
            }
        }
        db
    } else {
        Vec::new()
    };
    (dx, dw, db)
}

/// 3×3, stride-2 transposed convolution doubling the spatial size. Input
/// pixel `(i, j)` scatters into output `(2i + ki, 2j + kj)`; taps falling past
/// the far edge are dropped.
pub(crate) fn conv_transpose_forward(x: &Tensor4, weight: &[f64], out_ch: usize) -> Tensor4 {
    let (c, h, w) = (x.c, x.h, x.w);
    let (oh, ow) = (2 * h, 2 * w);
    let hw = h * w;
    let mut y = Tensor4::zeros(x.n, out_ch, oh, ow);
    let taps = tap_weights(weight, out_ch, c);
    y.data
        .par_chunks_mut(out_ch * oh * ow)
        .enumerate()
        .for_each(|(n, out)| {
            let mut tmp = vec![0.0; out_ch * hw];
            for (t, wt) in taps.iter().enumerate() {
                let (ki, kj) = (t / 3, t % 3);
                gemm(out_ch, c, hw, 1.0, wt, x.item(n), 0.0, &mut tmp);
                for o in 0..out_ch {
                    for i in 0..h {
                        let yy = 2 * i + ki;
                        if yy >= oh {
                            continue;
                        }
                        for j in 0..w {
                            let xx = 2 * j + kj;
                            if xx < ow {
                                out[(o * oh + yy) * ow + xx] += tmp[o * hw + i * w + j];
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Per-tap `(out × in)` matrices from a `(out, in, 3, 3)` kernel.
fn tap_weights(weight: &[f64], out_ch: usize, in_ch: usize) -> Vec<Vec<f64>> {
    (0..9)
        .map(|t| {
            let mut m = vec![0.0; out_ch * in_ch];
            for o in 0..out_ch {
                for c in 0..in_ch {
                    m[o * in_ch + c] = weight[(o * in_ch + c) * 9 + t];
                }
            }
            m
        })
        .collect()
}

pub(crate) fn conv_transpose_backward(
    x: &Tensor4,
    dy: &Tensor4,
    weight: &[f64],
) -> (Tensor4, Vec<f64>) {
    let (c, h, w) = (x.c, x.h, x.w);
    let out_ch = dy.c;
    let (oh, ow) = (dy.h, dy.w);
    let hw = h * w;
    let taps = tap_weights(weight, out_ch, c);
    let mut dx = Tensor4::zeros(x.n, c, h, w);
    let mut dtaps = vec![vec![0.0; out_ch * c]; 9];
    let mut gathered = vec![0.0; out_ch * hw];
    for n in 0..x.n {
        let g = dy.item(n);
        for (t, wt) in taps.iter().enumerate() {
            let (ki, kj) = (t / 3, t % 3);
            for o in 0..out_ch {
                for i in 0..h {
                    for j in 0..w {
                        let (yy, xx) = (2 * i + ki, 2 * j + kj);
                        gathered[o * hw + i * w + j] = if yy < oh && xx < ow {
                            g[(o * oh + yy) * ow + xx]
                        } else {
                            0.0
                        };
                    }
                }
            }
            gemm_at(c, out_ch, hw, 1.0, wt, &gathered, 1.0, dx.item_mut(n));
            gemm_bt(out_ch, hw, c, 1.0, &gathered, x.item(n), 1.0, &mut dtaps[t]);
        }
    }
    let mut dw = vec![0.0; weight.len()];
    for (t, m) in dtaps.iter().enumerate() {
        for o in 0..out_ch {
            for ci in 0..c {
                dw[(o * c + ci) * 9 + t] = m[o * c + ci];
            }
        }
    }
    (dx, dw)
}

pub(crate) struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

fn channel_iter(t: &Tensor4, ch: usize) -> impl Iterator<Item = &[f64]> {
    let hw = t.plane();
    (0..t.n).map(move |n| &t.data[(n * t.c + ch) * hw..(n * t.c + ch + 1) * hw])
}

/// Batch statistics per channel: `(mean, biased variance)`.
pub(crate) fn bn_batch_stats(x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let count = (x.n * x.plane()) as f64;
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    for ch in 0..x.c {
        let m = channel_iter(x, ch).flatten().sum::<f64>() / count;
        let v = channel_iter(x, ch).flatten().map(|&v| (v - m) * (v - m)).sum::<f64>() / count;
        mean[ch] = m;
        var[ch] = v;
    }
    (mean, var)
}

pub(crate) fn bn_forward(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    train: bool,
) -> (Tensor4, BnCache) {
    let hw = x.plane();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.data.len()];
    let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
    for (idx, (xv, (xh, yv))) in x
        .data
        .iter()
        .zip(xhat.iter_mut().zip(y.data.iter_mut()))
        .enumerate()
    {
        let ch = (idx / hw) % x.c;
        *xh = (xv - mean[ch]) * inv_std[ch];
        *yv = gamma[ch] * *xh + beta[ch];
    }
    (y, BnCache { xhat, inv_std, train })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward(dy: &Tensor4, cache: &BnCache, gamma: &[f64]) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let hw = dy.plane();
    let c = dy.c;
    let count = (dy.n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (idx, (g, xh)) in dy.data.iter().zip(&cache.xhat).enumerate() {
        let ch = (idx / hw) % c;
        dgamma[ch] += g * xh;
        dbeta[ch] += g;
    }
    let mut dx = Tensor4::zeros(dy.n, c, dy.h, dy.w);
    for (idx, (d, (g, xh))) in dx
        .data
        .iter_mut()
        .zip(dy.data.iter().zip(&cache.xhat))
        .enumerate()
    {
        let ch = (idx / hw) % c;
        *d = if cache.train {
            // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
            gamma[ch] * cache.inv_std[ch] / count * (count * g - dbeta[ch] - xh * dgamma[ch])
        } else {
            gamma[ch] * cache.inv_std[ch] * g
        };
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn elu_forward(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    y.data
        .iter_mut()
        .for_each(|v| *v = if *v > 0.0 { *v } else { v.exp_m1() });
    y
}

/// Gradient through ELU given its input `x`.
pub(crate) fn elu_backward(x: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data.iter_mut().zip(&x.data) {
        if xv <= 0.0 {
            *d *= xv.exp();
        }
    }
    dx
}

/// Outputs are clamped to the open interval `(0, 1)`.
pub(crate) fn sigmoid_forward(x: &Tensor4) -> Tensor4 {
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| {
        let s = if *v >= 0.0 {
            1.0 / (1.0 + (-*v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        };
        *v = s.clamp(f64::MIN_POSITIVE, HI);
    });
    y
}

/// Gradient through the sigmoid given its output `y`.
pub(crate) fn sigmoid_backward(y: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    for (d, &s) in dx.data.iter_mut().zip(&y.data) {
        *d *= s * (1.0 - s);
    }
    dx
}

pub(crate) fn avgpool_forward(x: &Tensor4) -> Tensor4 {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor4::zeros(x.n, x.c, oh, ow);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut y.data[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * x.w + 2 * j];
                let b = src[2 * i * x.w + 2 * j + 1];
                let c = src[(2 * i + 1) * x.w + 2 * j];
                let d = src[(2 * i + 1) * x.w + 2 * j + 1];
                dst[i * ow + j] = 0.25 * (a + b + c + d);
            }
        }
    }
    y
}

pub(crate) fn avgpool_backward(dy: &Tensor4) -> Tensor4 {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor4::zeros(dy.n, dy.c, h, w);
    for p in 0..dy.n * dy.c {
        let src = &dy.data[p * dy.h * dy.w..(p + 1) * dy.h * dy.w];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * src[(y / 2) * dy.w + x / 2];
            }
        }
    }
    dx
}

pub(crate) fn upsample_forward(x: &Tensor4) -> Tensor4 {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Tensor4::zeros(x.n, x.c, h, w);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut y.data[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample_backward(dy: &Tensor4) -> Tensor4 {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor4::zeros(dy.n, dy.c, h, w);
    for p in 0..dy.n * dy.c {
        let src = &dy.data[p * dy.h * dy.w..(p + 1) * dy.h * dy.w];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}
