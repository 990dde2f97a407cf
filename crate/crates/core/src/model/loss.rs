//! Detection loss: L1 localization, softmax focal classification, and
//! cross-entropy direction, combined with fixed weights.
//!
//! * `loc`: mean |pred − target| over the positive cells' regression values.
//! * `cls`: focal loss summed over all cells, divided by max(1, positives).
//! * `dir`: mean cross-entropy over positive cells.
//!
//! With no positive cell `loc` and `dir` are 0 and `cls` is the plain sum.

use serde::{Deserialize, Serialize};

use super::head::{DenseHead, Targets, REG_DIMS};
use crate::error::{Error, Result};
use crate::tensor::{CustomBackward, Tape, Tensor, Var};

/// Weights of (loc, cls, dir).
pub const LOSS_WEIGHTS: [f64; 3] = [0.25, 1.0, 0.2];
pub const FOCAL_GAMMA: f64 = 2.0;
/// Weight of foreground cells; background cells get `1 − α`.
pub const FOCAL_ALPHA: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(loc: f64, cls: f64, dir: f64) -> Self {
        let [wl, wc, wd] = LOSS_WEIGHTS;
        Self {
            loc,
            cls,
            dir,
            total: wl * loc + wc * cls + wd * dir,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.loc, self.cls, self.dir, self.total].iter().all(|v| v.is_finite())
    }
}

/// `−α (1 − p)^γ ln p` for target probability `p`.
pub fn focal_term(p: f64, alpha: f64, gamma: f64) -> f64 {
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

/// Derivative of [`focal_term`] with respect to `p`.
fn focal_slope(p: f64, alpha: f64, gamma: f64) -> f64 {
    let q = 1.0 - p;
    let pow_g1 = if gamma == 1.0 { 1.0 } else { q.powf(gamma - 1.0) };
    alpha * (gamma * pow_g1 * p.ln() - q.powf(gamma) / p)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss values and their gradients with respect to the head output.
struct Evaluated {
    parts: [f64; 3],
    grads: [Vec<f64>; 3],
    /// Sign of each L1 residual, for kink detection.
    signs: Vec<i8>,
}

fn evaluate(head: &[f32], classes: usize, plane: usize, t: &Targets) -> Evaluated {
    let n_cls = classes + 1;
    let k = n_cls + REG_DIMS + 2;
    let at = |ch: usize, cell: usize| head[ch * plane + cell] as f64;
    let mut grads = [vec![0.0; k * plane], vec![0.0; k * plane], vec![0.0; k * plane]];
    let n_pos = t.positives.len();
    let norm = n_pos.max(1) as f64;

    let mut cls = 0.0;
    for cell in 0..plane {
        let z: Vec<f64> = (0..n_cls).map(|c| at(c, cell)).collect();
        let p = softmax(&z);
        let target = t.cls[cell];
        let alpha = if target == 0 { 1.0 - FOCAL_ALPHA } else { FOCAL_ALPHA };
        let pt = p[target].max(f64::MIN_POSITIVE);
        cls += focal_term(pt, alpha, FOCAL_GAMMA);
        let dl_dp = focal_slope(pt, alpha, FOCAL_GAMMA);
        for (c, &pc) in p.iter().enumerate() {
            let dp_dz = pt * (f64::from(u8::from(c == target)) - pc);
            grads[1][c * plane + cell] = dl_dp * dp_dz / norm;
        }
    }
    cls /= norm;

    let (mut loc, mut dir) = (0.0, 0.0);
    let mut signs = Vec::with_capacity(n_pos * REG_DIMS);
    let loc_norm = (n_pos * REG_DIMS) as f64;
    for (j, &cell) in t.positives.iter().enumerate() {
        for r in 0..REG_DIMS {
            let ch = n_cls + r;
            let e = at(ch, cell) - t.reg[j][r] as f64;
            loc += e.abs();
            let s = if e > 0.0 { 1i8 } else if e < 0.0 { -1 } else { 0 };
            signs.push(s);
            grads[0][ch * plane + cell] = s as f64 / loc_norm;
        }
        let base = n_cls + REG_DIMS;
        let p = softmax(&[at(base, cell), at(base + 1, cell)]);
        dir -= p[t.dir[j]].max(f64::MIN_POSITIVE).ln();
        for (c, &pc) in p.iter().enumerate() {
            grads[2][(base + c) * plane + cell] = (pc - f64::from(u8::from(c == t.dir[j]))) / n_pos as f64;
        }
    }
    if n_pos > 0 {
        loc /= loc_norm;
        dir /= n_pos as f64;
    }
    Evaluated {
        parts: [loc, cls, dir],
        grads,
        signs,
    }
}

struct DetectionLossRule {
    grads: [Vec<f64>; 3],
    signature: Vec<u64>,
}

impl CustomBackward for DetectionLossRule {
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f32]) -> Result<Vec<Option<Vec<f32>>>> {
        let g: Vec<f32> = (0..self.grads[0].len())
            .map(|i| (0..3).map(|p| grad_out[p] as f64 * self.grads[p][i]).sum::<f64>() as f32)
            .collect();
        Ok(vec![Some(g)])
    }

    fn branch_signature(&self) -> Vec<u64> {
        self.signature.clone()
    }
}

fn check_targets(classes: usize, plane: usize, t: &Targets) -> Result<()> {
    if t.cls.len() != plane {
        return Err(Error::Dimension(format!(
            "targets cover {} cells, head has {plane}",
            t.cls.len()
        )));
    }
    if t.reg.len() != t.positives.len() || t.dir.len() != t.positives.len() {
        return Err(Error::Internal("target lists differ in length".into()));
    }
    if t.cls.iter().any(|&c| c > classes) || t.positives.iter().any(|&c| c >= plane) {
        return Err(Error::Input("target class or cell out of range".into()));
    }
    Ok(())
}

/// Records the loss of head output `head` `[K, H, W]` on the tape. Returns
/// the weighted total (scalar) and the `[3]` vector `(loc, cls, dir)`.
pub fn loss_on(tape: &mut Tape, head: Var, targets: &Targets, classes: usize) -> Result<(Var, Var)> {
    let (k, h, w) = tape.value(head).dims3()?;
    if k != classes + 1 + REG_DIMS + 2 {
        return Err(Error::Dimension(format!("head has {k} channels for {classes} classes")));
    }
    let plane = h * w;
    check_targets(classes, plane, targets)?;
    let ev = evaluate(tape.value(head).data(), classes, plane, targets);
    let signature = ev.signs.iter().map(|&s| s as u64).collect();
    let parts_t = Tensor::new(vec![3], ev.parts.iter().map(|&v| v as f32).collect())?;
    let parts = tape.custom(
        &[head],
        parts_t,
        Box::new(DetectionLossRule {
            grads: ev.grads,
            signature,
        }),
    );
    let weights = tape.constant(Tensor::new(vec![3], LOSS_WEIGHTS.iter().map(|&v| v as f32).collect())?);
    let weighted = tape.mul(parts, weights)?;
    let total = tape.sum(weighted);
    let [loc, cls, dir] = ev.parts;
    tape.set_exact(total, LossBreakdown::new(loc, cls, dir).total)?;
    Ok((total, parts))
}

pub fn compute_loss(pred: &DenseHead, targets: &Targets) -> Result<LossBreakdown> {
    let plane = pred.height() * pred.width();
    check_targets(pred.classes, plane, targets)?;
    let [loc, cls, dir] = evaluate(pred.data.data(), pred.classes, plane, targets).parts;
    Ok(LossBreakdown::new(loc, cls, dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_identity() {
        let l = LossBreakdown::new(4.0, 2.0, 5.0);
        assert_eq!(l.total, 4.0);
    }

    #[test]
    fn focal_slope_matches_difference() {
        for p in [0.05, 0.3, 0.7, 0.99] {
            let h = 1e-6;
            let num = (focal_term(p + h, 0.25, 2.0) - focal_term(p - h, 0.25, 2.0)) / (2.0 * h);
            assert!((num - focal_slope(p, 0.25, 2.0)).abs() < 1e-6 * num.abs().max(1.0));
        }
    }
}
