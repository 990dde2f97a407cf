//! Multi-head attention restricted to a k×k window around each query on a
//! token grid, with learned relative-position bias.
//!
//! Slice layouts: `q`, `k` are `[n, heads·dq]`, `v` and the output are
//! `[n, heads·dv]` (head `h` owns columns `h·d..(h+1)·d`), the bias table is
//! `[heads, (2k−1)²]`, and cached probabilities are `[n, heads, k²]` with the
//! window in row-major order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::kernels::softmax_rows_backward;
use crate::tensor::{CustomBackward, Tensor};

/// Shape of one windowed attention evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub heads: usize,
    /// Per-head query/key dim.
    pub dq: usize,
    /// Per-head value dim.
    pub dv: usize,
}

impl WindowGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(Error::Config(format!("neighborhood {} must be odd", self.k)));
        }
        if self.heads == 0 || self.dq == 0 || self.dv == 0 {
            return Err(Error::Config("attention heads and dims must be >= 1".into()));
        }
        if self.height < self.k || self.width < self.k {
            return Err(Error::Config(format!(
                "grid {}x{} is smaller than the {}x{} neighborhood",
                self.height, self.width, self.k, self.k
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn bias_len(&self) -> usize {
        (2 * self.k - 1) * (2 * self.k - 1)
    }

    /// Logits are `(q·k + bias) / sqrt(dv)`.
    pub fn scale(&self) -> f32 {
        1.0 / (self.dv as f32).sqrt()
    }

    fn check_inputs(&self, q: &[f32], k: &[f32], v: &[f32], bias: &[f32]) -> Result<()> {
        let n = self.tokens();
        let want = [
            ("query", q.len(), n * self.heads * self.dq),
            ("key", k.len(), n * self.heads * self.dq),
            ("value", v.len(), n * self.heads * self.dv),
            ("bias", bias.len(), self.heads * self.bias_len()),
        ];
        for (what, got, expected) in want {
            if got != expected {
                return Err(Error::Dimension(format!(
                    "{what} has {got} elements, expected {expected}"
                )));
            }
        }
        Ok(())
    }
}

/// First row (or column) of the window for a query at `pos`, clamped so the
/// window lies inside `0..len`.
pub fn window_start(pos: usize, len: usize, k: usize) -> usize {
    let half = (k / 2) as isize;
    (pos as isize - half).clamp(0, (len - k) as isize) as usize
}

/// Flat bias-table index of the offset `(dr, dc)`, both in `-(k-1)..=k-1`.
pub fn bias_index(dr: isize, dc: isize, k: usize) -> usize {
    let span = 2 * k as isize - 1;
    let r = dr + k as isize - 1;
    let c = dc + k as isize - 1;
    debug_assert!((0..span).contains(&r) && (0..span).contains(&c));
    (r * span + c) as usize
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0f64;
    for v in row.iter_mut() {
        let e = ((*v - max) as f64).exp();
        denom += e;
        *v = e as f32;
    }
    let inv = 1.0 / denom;
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

/// Windowed attention. Returns `(output, probabilities)`.
pub fn window_attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    bias: &[f32],
    g: &WindowGeometry,
) -> Result<(Vec<f32>, Vec<f32>)> {
    g.validate()?;
    g.check_inputs(q, k, v, bias)?;
    let (n, kk, nb) = (g.tokens(), g.k * g.k, g.bias_len());
    let (qw, vw) = (g.heads * g.dq, g.heads * g.dv);
    let scale = g.scale();
    let mut out = vec![0f32; n * vw];
    let mut probs = vec![0f32; n * g.heads * kk];
    out.par_chunks_mut(vw)
        .zip(probs.par_chunks_mut(g.heads * kk))
        .enumerate()
        .for_each(|(i, (orow, prow))| {
            let (r, c) = (i / g.width, i % g.width);
            let (rs, cs) = (window_start(r, g.height, g.k), window_start(c, g.width, g.k));
            for h in 0..g.heads {
                let qi = &q[i * qw + h * g.dq..i * qw + (h + 1) * g.dq];
                let p = &mut prow[h * kk..(h + 1) * kk];
                for a in 0..g.k {
                    for b in 0..g.k {
                        let j = (rs + a) * g.width + cs + b;
                        let kj = &k[j * qw + h * g.dq..j * qw + (h + 1) * g.dq];
                        let bi = bias_index(
                            (rs + a) as isize - r as isize,
                            (cs + b) as isize - c as isize,
                            g.k,
                        );
                        p[a * g.k + b] = (dot(qi, kj) + bias[h * nb + bi]) * scale;
                    }
                }
                softmax_in_place(p);
                let o = &mut orow[h * g.dv..(h + 1) * g.dv];
                for a in 0..g.k {
                    for b in 0..g.k {
                        let j = (rs + a) * g.width + cs + b;
                        let pj = p[a * g.k + b];
                        let vj = &v[j * vw + h * g.dv..j * vw + (h + 1) * g.dv];
                        for (od, &vd) in o.iter_mut().zip(vj) {
                            *od += pj * vd;
                        }
                    }
                }
            }
        });
    Ok((out, probs))
}

/// Gradients `(dq, dk, dv, dbias)` of windowed attention. Heads are
/// independent and run in parallel; within a head queries are visited in
/// index order.
pub fn window_attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    grad_out: &[f32],
    g: &WindowGeometry,
) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, kk, nb) = (g.tokens(), g.k * g.k, g.bias_len());
    let (qw, vw) = (g.heads * g.dq, g.heads * g.dv);
    let scale = g.scale();

    let per_head: Vec<_> = (0..g.heads)
        .into_par_iter()
        .map(|h| {
            let mut dq = vec![0f32; n * g.dq];
            let mut dk = vec![0f32; n * g.dq];
            let mut dv = vec![0f32; n * g.dv];
            let mut db = vec![0f64; nb];
            let mut dp = vec![0f32; kk];
            for i in 0..n {
                let (r, c) = (i / g.width, i % g.width);
                let (rs, cs) = (window_start(r, g.height, g.k), window_start(c, g.width, g.k));
                let p = &probs[(i * g.heads + h) * kk..(i * g.heads + h + 1) * kk];
                let go = &grad_out[i * vw + h * g.dv..i * vw + (h + 1) * g.dv];
                for a in 0..g.k {
                    for b in 0..g.k {
                        let j = (rs + a) * g.width + cs + b;
                        let vj = &v[j * vw + h * g.dv..j * vw + (h + 1) * g.dv];
                        dp[a * g.k + b] = dot(go, vj);
                        let pj = p[a * g.k + b];
                        for (d, &gd) in dv[j * g.dv..(j + 1) * g.dv].iter_mut().zip(go) {
                            *d += pj * gd;
                        }
                    }
                }
                let ds = softmax_rows_backward(p, &dp, kk);
                let qi = &q[i * qw + h * g.dq..i * qw + (h + 1) * g.dq];
                for a in 0..g.k {
                    for b in 0..g.k {
                        let j = (rs + a) * g.width + cs + b;
                        let s = ds[a * g.k + b] * scale;
                        let kj = &k[j * qw + h * g.dq..j * qw + (h + 1) * g.dq];
                        for (d, &kd) in dq[i * g.dq..(i + 1) * g.dq].iter_mut().zip(kj) {
                            *d += s * kd;
                        }
                        for (d, &qd) in dk[j * g.dq..(j + 1) * g.dq].iter_mut().zip(qi) {
                            *d += s * qd;
                        }
                        let bi = bias_index(
                            (rs + a) as isize - r as isize,
                            (cs + b) as isize - c as isize,
                            g.k,
                        );
                        db[bi] += s as f64;
                    }
                }
            }
            (dq, dk, dv, db)
        })
        .collect();

    let mut gq = vec![0f32; n * qw];
    let mut gk = vec![0f32; n * qw];
    let mut gv = vec![0f32; n * vw];
    let mut gb = vec![0f32; g.heads * nb];
    for (h, (dq, dk, dv, db)) in per_head.into_iter().enumerate() {
        for i in 0..n {
            gq[i * qw + h * g.dq..i * qw + (h + 1) * g.dq].copy_from_slice(&dq[i * g.dq..(i + 1) * g.dq]);
            gk[i * qw + h * g.dq..i * qw + (h + 1) * g.dq].copy_from_slice(&dk[i * g.dq..(i + 1) * g.dq]);
            gv[i * vw + h * g.dv..i * vw + (h + 1) * g.dv].copy_from_slice(&dv[i * g.dv..(i + 1) * g.dv]);
        }
        for (dst, src) in gb[h * nb..(h + 1) * nb].iter_mut().zip(db) {
            *dst = src as f32;
        }
    }
    (gq, gk, gv, gb)
}

/// Tape rule for windowed attention; inputs are `[q, k, v, bias]`.
pub(crate) struct WindowAttentionRule {
    pub geometry: WindowGeometry,
    pub probs: Vec<f32>,
}

impl CustomBackward for WindowAttentionRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
    ) -> Result<Vec<Option<Vec<f32>>>> {
        let [q, k, v, _] = inputs else {
            return Err(Error::Internal("window attention expects 4 inputs".into()));
        };
        let (gq, gk, gv, gb) =
            window_attention_backward(q.data(), k.data(), v.data(), &self.probs, grad_out, &self.geometry);
        Ok(vec![Some(gq), Some(gk), Some(gv), Some(gb)])
    }
}

/// Attention over all `n` keys with logits outside each query's clamped
/// window set to −∞. Same arithmetic as [`window_attention_forward`] but
/// O(n²) per head; used as the efficiency baseline.
pub fn masked_global_attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    bias: &[f32],
    g: &WindowGeometry,
) -> Result<Vec<f32>> {
    g.validate()?;
    g.check_inputs(q, k, v, bias)?;
    let n = g.tokens();
    let nb = g.bias_len();
    let (qw, vw) = (g.heads * g.dq, g.heads * g.dv);
    let scale = g.scale();
    let mut out = vec![0f32; n * vw];
    out.par_chunks_mut(vw).enumerate().for_each(|(i, orow)| {
        let (r, c) = (i / g.width, i % g.width);
        let (rs, cs) = (window_start(r, g.height, g.k), window_start(c, g.width, g.k));
        let mut logits = vec![0f32; n];
        for h in 0..g.heads {
            let qi = &q[i * qw + h * g.dq..i * qw + (h + 1) * g.dq];
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &k[j * qw + h * g.dq..j * qw + (h + 1) * g.dq];
                let s = dot(qi, kj);
                let (jr, jc) = (j / g.width, j % g.width);
                *l = if (rs..rs + g.k).contains(&jr) && (cs..cs + g.k).contains(&jc) {
                    let bi = bias_index(jr as isize - r as isize, jc as isize - c as isize, g.k);
                    (s + bias[h * nb + bi]) * scale
                } else {
                    f32::NEG_INFINITY
                };
            }
            softmax_in_place(&mut logits);
            let o = &mut orow[h * g.dv..(h + 1) * g.dv];
            for (j, &pj) in logits.iter().enumerate() {
                let vj = &v[j * vw + h * g.dv..j * vw + (h + 1) * g.dv];
                for (od, &vd) in o.iter_mut().zip(vj) {
                    *od += pj * vd;
                }
            }
        }
    });
    Ok(out)
}
