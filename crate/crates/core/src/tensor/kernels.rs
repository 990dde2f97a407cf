//! Slice-level forward and backward kernels.
//!
//! Every reduction runs in f64 over a fixed index order. Parallel loops split
//! only over independent outputs, so thread count never changes a result bit.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_size(&self) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Config(format!(
                "conv kernel {}x{} must be nonempty",
                self.kernel_h, self.kernel_w
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        let span = |n: usize, k: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < k {
                return Err(Error::Config(format!(
                    "conv kernel {k} larger than padded input {padded}"
                )));
            }
            if !(padded - k).is_multiple_of(self.stride) {
                return Err(Error::Config(format!(
                    "conv output size ({n} + 2*{} - {k})/{} + 1 is not integral",
                    self.padding, self.stride
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((span(self.height, self.kernel_h)?, span(self.width, self.kernel_w)?))
    }
}

/// Output positions `o` in `0..out` whose input index `o*stride + k - pad`
/// falls inside `0..len`.
fn valid_range(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let k = k as isize;
    let pad = pad as isize;
    let s = stride as isize;
    // smallest o with o*s + k - pad >= 0
    let lo = if pad - k <= 0 { 0 } else { (pad - k + s - 1) / s };
    // largest o with o*s + k - pad <= len - 1
    let top = len as isize - 1 + pad - k;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top / s) + 1).min(out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub fn conv2d_forward(x: &[f32], weight: &[f32], bias: &[f32], g: &ConvGeometry) -> Result<Vec<f32>> {
    let (oh, ow) = g.out_size()?;
    let plane = g.height * g.width;
    let kk = g.kernel_h * g.kernel_w;
    let mut out = vec![0f32; g.out_channels * oh * ow];
    out.par_chunks_mut(oh * ow.max(1))
        .enumerate()
        .for_each(|(co, out_plane)| {
            let mut acc = vec![bias[co] as f64; oh * ow];
            for ci in 0..g.in_channels {
                let xin = &x[ci * plane..(ci + 1) * plane];
                let wbase = (co * g.in_channels + ci) * kk;
                for ky in 0..g.kernel_h {
                    let (oy0, oy1) = valid_range(oh, g.height, ky, g.stride, g.padding);
                    for kx in 0..g.kernel_w {
                        let wv = weight[wbase + ky * g.kernel_w + kx] as f64;
                        let (ox0, ox1) = valid_range(ow, g.width, kx, g.stride, g.padding);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let row = &xin[iy * g.width..(iy + 1) * g.width];
                            let arow = &mut acc[oy * ow + ox0..oy * ow + ox1];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.padding;
                                for (a, &xv) in arow.iter_mut().zip(&row[ix0..ix0 + (ox1 - ox0)]) {
                                    *a += wv * xv as f64;
                                }
                            } else {
                                for (j, a) in arow.iter_mut().enumerate() {
                                    let ix = (ox0 + j) * g.stride + kx - g.padding;
                                    *a += wv * row[ix] as f64;
                                }
                            }
                        }
                    }
                }
            }
            for (o, a) in out_plane.iter_mut().zip(acc) {
                *o = a as f32;
            }
        });
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    x: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    g: &ConvGeometry,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let (oh, ow) = g.out_size()?;
    let plane = g.height * g.width;
    let oplane = oh * ow;
    let kk = g.kernel_h * g.kernel_w;

    let mut gx = vec![0f32; g.in_channels * plane];
    gx.par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(ci, gplane)| {
            let mut acc = vec![0f64; plane];
            for co in 0..g.out_channels {
                let go = &grad_out[co * oplane..(co + 1) * oplane];
                let wbase = (co * g.in_channels + ci) * kk;
                for ky in 0..g.kernel_h {
                    let (oy0, oy1) = valid_range(oh, g.height, ky, g.stride, g.padding);
                    for kx in 0..g.kernel_w {
                        let wv = weight[wbase + ky * g.kernel_w + kx] as f64;
                        let (ox0, ox1) = valid_range(ow, g.width, kx, g.stride, g.padding);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let grow = &go[oy * ow + ox0..oy * ow + ox1];
                            let arow = &mut acc[iy * g.width..(iy + 1) * g.width];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.padding;
                                for (a, &gv) in arow[ix0..ix0 + grow.len()].iter_mut().zip(grow) {
                                    *a += wv * gv as f64;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let ix = (ox0 + j) * g.stride + kx - g.padding;
                                    arow[ix] += wv * gv as f64;
                                }
                            }
                        }
                    }
                }
            }
            for (o, a) in gplane.iter_mut().zip(acc) {
                *o = a as f32;
            }
        });

    let mut gw = vec![0f32; g.out_channels * g.in_channels * kk];
    gw.par_chunks_mut((g.in_channels * kk).max(1))
        .enumerate()
        .for_each(|(co, gwc)| {
            let go = &grad_out[co * oplane..(co + 1) * oplane];
            for ci in 0..g.in_channels {
                let xin = &x[ci * plane..(ci + 1) * plane];
                for ky in 0..g.kernel_h {
                    let (oy0, oy1) = valid_range(oh, g.height, ky, g.stride, g.padding);
                    for kx in 0..g.kernel_w {
                        let (ox0, ox1) = valid_range(ow, g.width, kx, g.stride, g.padding);
                        let mut acc = 0f64;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let grow = &go[oy * ow + ox0..oy * ow + ox1];
                            let row = &xin[iy * g.width..(iy + 1) * g.width];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.padding;
                                for (&gv, &xv) in grow.iter().zip(&row[ix0..ix0 + grow.len()]) {
                                    acc += gv as f64 * xv as f64;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    acc += gv as f64 * row[(ox0 + j) * g.stride + kx - g.padding] as f64;
                                }
                            }
                        }
                        gwc[ci * kk + ky * g.kernel_w + kx] = acc as f32;
                    }
                }
            }
        });

    let gb = (0..g.out_channels)
        .map(|co| {
            grad_out[co * oplane..(co + 1) * oplane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Ok((gx, gw, gb))
}

/// `x[rows, m] * w[m, q] + b[q]`.
pub fn linear_forward(x: &[f32], w: &[f32], b: &[f32], rows: usize, m: usize, q: usize) -> Vec<f32> {
    let mut out = vec![0f32; rows * q];
    if q == 0 {
        return out;
    }
    out.par_chunks_mut(q).enumerate().for_each(|(r, orow)| {
        let mut acc: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let xr = &x[r * m..(r + 1) * m];
        for (i, &xi) in xr.iter().enumerate() {
            let xi = xi as f64;
            let wrow = &w[i * q..(i + 1) * q];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xi * wv as f64;
            }
        }
        for (o, a) in orow.iter_mut().zip(acc) {
            *o = a as f32;
        }
    });
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    rows: usize,
    m: usize,
    q: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut gx = vec![0f32; rows * m];
    if m > 0 {
        gx.par_chunks_mut(m).enumerate().for_each(|(r, gxr)| {
            let go = &grad_out[r * q..(r + 1) * q];
            for (i, g) in gxr.iter_mut().enumerate() {
                let wrow = &w[i * q..(i + 1) * q];
                *g = go
                    .iter()
                    .zip(wrow)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>() as f32;
            }
        });
    }
    let mut gw = vec![0f32; m * q];
    if q > 0 {
        gw.par_chunks_mut(q).enumerate().for_each(|(i, gwr)| {
            let mut acc = vec![0f64; q];
            for r in 0..rows {
                let xi = x[r * m + i] as f64;
                if xi == 0.0 {
                    continue;
                }
                for (a, &g) in acc.iter_mut().zip(&grad_out[r * q..(r + 1) * q]) {
                    *a += xi * g as f64;
                }
            }
            for (o, a) in gwr.iter_mut().zip(acc) {
                *o = a as f32;
            }
        });
    }
    let mut gb = vec![0f64; q];
    for r in 0..rows {
        for (a, &g) in gb.iter_mut().zip(&grad_out[r * q..(r + 1) * q]) {
            *a += g as f64;
        }
    }
    (gx, gw, gb.into_iter().map(|v| v as f32).collect())
}

/// Softmax over each contiguous row of length `n`, with max subtraction.
pub fn softmax_rows(x: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    if n == 0 {
        return out;
    }
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        softmax_into(row, orow);
    }
    out
}

pub(crate) fn softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut denom = 0f64;
    let mut tmp = Vec::with_capacity(row.len());
    for &v in row {
        let e = (v as f64 - max).exp();
        denom += e;
        tmp.push(e);
    }
    for (o, e) in out.iter_mut().zip(tmp) {
        *o = (e / denom) as f32;
    }
}

/// Given softmax output `y` and upstream `gy`, row-wise `y * (gy - <gy, y>)`.
pub fn softmax_rows_backward(y: &[f32], gy: &[f32], n: usize) -> Vec<f32> {
    let mut gx = vec![0f32; y.len()];
    if n == 0 {
        return gx;
    }
    for ((yr, gr), gxr) in y.chunks(n).zip(gy.chunks(n)).zip(gx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
        for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
            *o = (yv as f64 * (gv as f64 - dot)) as f32;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for len in 1..9 {
            for k in 0..5 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        let padded = len + 2 * pad;
                        if padded < 5 {
                            continue;
                        }
                        let out = (padded - 5) / stride + 1;
                        let (lo, hi) = valid_range(out, len, k, stride, pad);
                        let brute: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < len
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "len {len} k {k} s {stride} p {pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_uniform_and_stable() {
        let y = softmax_rows(&[0.0, 0.0, 0.0], 3);
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let y = softmax_rows(&[1000.0, 1000.0], 2);
        assert_eq!(y, vec![0.5, 0.5]);
    }
}
