use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{stable_hash, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step, in `[1e-4, 1e-2]`.
    pub eps: f32,
    /// Largest accepted relative error.
    pub tol: f32,
    /// Lower bound on the relative-error denominator. f32 forward passes
    /// carry ~1e-6 absolute noise, which would otherwise dominate tiny
    /// gradients.
    pub grad_floor: f32,
    /// When set, check at most this many randomly chosen entries per tensor.
    pub max_entries_per_param: Option<usize>,
    /// When set, check only parameters whose name starts with one of these.
    pub only: Option<Vec<String>>,
    pub sample_seed: u64,
    /// Largest share of entries that may be skipped because no step is both
    /// kink-free and resolvable above the noise.
    pub max_skip_fraction: f64,
}

impl GradCheckOptions {
    pub fn new(eps: f32, tol: f32) -> Self {
        Self {
            eps,
            tol,
            grad_floor: 1e-2,
            max_entries_per_param: None,
            only: None,
            sample_seed: 0,
            max_skip_fraction: 0.5,
        }
    }

    pub fn sampled(mut self, per_param: usize, seed: u64) -> Self {
        self.max_entries_per_param = Some(per_param);
        self.sample_seed = seed;
        self
    }

    pub fn only(mut self, prefixes: &[&str]) -> Self {
        self.only = Some(prefixes.iter().map(|s| s.to_string()).collect());
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step that gave a kink-free stencil.
    pub eps: f64,
    pub stencil: Stencil,
}

/// Difference formula used for one entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    Central,
    Forward,
    Backward,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub worst: Option<EntryCheck>,
    /// Entries with no kink-free step that also resolves `tol` above the
    /// measured noise.
    pub skipped: usize,
    /// Measured absolute noise of one objective difference.
    pub noise: f64,
    /// Largest relative error seen in each checked parameter.
    pub per_param: BTreeMap<String, f64>,
    /// Parameters whose sampled entries were all skipped.
    pub uncovered: Vec<String>,
}

type Objective<'a> = &'a (dyn Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync);

/// Seed of the projection that contracts tensor-valued objectives.
const PROJECTION_SEED: u64 = 0x9e37_79b9;

/// Scalar objective: a `[1]` output as is (its exact value when the tape
/// has one), anything larger contracted with a fixed uniform(−1, 1)
/// projection. The contraction runs in f64 so the objective is not rounded
/// to f32 before differencing.
fn scalarize(tape: &Tape, out: Var) -> f64 {
    let t = tape.value(out);
    if t.numel() == 1 {
        return tape.exact(out).unwrap_or(t.data()[0] as f64);
    }
    let r = Tensor::rand_uniform(t.shape(), -1.0, 1.0, PROJECTION_SEED);
    t.data().iter().zip(r.data()).map(|(&y, &w)| y as f64 * w as f64).sum()
}

/// Value and branch signature of one evaluation.
fn eval(f: Objective, p: &ParamStore) -> Result<(f64, Vec<u64>)> {
    let mut tape = Tape::new();
    let out = f(&mut tape, p)?;
    Ok((scalarize(&tape, out), tape.branch_signature()))
}

const MIN_EPS: f32 = 1e-4;
/// Noise gain of the one-sided stencil `(3, 4, 1) / 2` relative to central.
const ONE_SIDED_NOISE: f64 = 4.0;
const NOISE_PROBES: usize = 16;
const PROBE_STEP: f32 = 1e-5;

/// Largest second difference `|f(x + τ) + f(x − τ) − 2f(x)|` over a few
/// entries at a step small enough that curvature is negligible, so what
/// remains is rounding noise of the forward pass. It does not involve the
/// gradient under test. Probes that cross a kink are ignored.
fn measure_noise(
    f: Objective,
    params: &ParamStore,
    entries: &[(String, usize)],
    base: f64,
    base_sig: &[u64],
) -> Result<f64> {
    let stride = (entries.len() / NOISE_PROBES).max(1);
    let residuals: Vec<Option<f64>> = entries
        .par_iter()
        .step_by(stride)
        .map(|(name, i)| -> Result<Option<f64>> {
            let mut p = params.clone();
            let x0 = p.get(name)?.data()[*i];
            p.get_mut(name)?.data_mut()[*i] = x0 + PROBE_STEP;
            let (fp, sig_p) = eval(f, &p)?;
            p.get_mut(name)?.data_mut()[*i] = x0 - PROBE_STEP;
            let (fm, sig_m) = eval(f, &p)?;
            let clean = sig_p == base_sig && sig_m == base_sig;
            Ok(clean.then(|| (fp + fm - 2.0 * base).abs()))
        })
        .collect::<Result<_>>()?;
    Ok(residuals.into_iter().flatten().fold(0.0, f64::max))
}

/// Compares tape gradients of `f` with finite differences at every entry
/// of every parameter. `f` may return any shape; see [`scalarize`].
///
/// A difference quotient is only meaningful when the stencil stays on the
/// smooth piece containing `x`. Entries whose stencil changes the tape's
/// branch signature fall back to a second-order one-sided difference on a
/// clean side, then to halved steps. Steps stop shrinking once the noise
/// of the quotient, from the measured evaluation noise, would exceed half
/// the tolerance. Entries with no usable step are skipped; skips are
/// counted and bounded by `max_skip_fraction`.
pub fn finite_diff_grad_check<F>(f: F, params: &ParamStore, eps: f32, tol: f32) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    GradCheckOptions::new(eps, tol).run(f, params)
}

impl GradCheckOptions {
    pub fn run<F>(&self, f: F, params: &ParamStore) -> Result<CheckReport>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
    {
        if !(1e-4..=1e-2).contains(&self.eps) {
            return Err(Error::Config(format!(
                "finite-difference eps {} outside [1e-4, 1e-2]",
                self.eps
            )));
        }
        let f: Objective = &f;

        let mut tape = Tape::new();
        let out = f(&mut tape, params)?;
        let base = scalarize(&tape, out);
        let base_sig = tape.branch_signature();
        let loss = if tape.value(out).numel() == 1 {
            out
        } else {
            let r = Tensor::rand_uniform(tape.shape(out), -1.0, 1.0, PROJECTION_SEED);
            let r = tape.constant(r);
            let weighted = tape.mul(out, r)?;
            tape.sum(weighted)
        };
        let grads = tape.backward(loss)?.param_grads(&tape);
        let (again, _) = eval(f, params)?;
        if base.to_bits() != again.to_bits() {
            return Err(Error::Determinism(format!(
                "two evaluations gave {base} and {again}"
            )));
        }

        let mut entries: Vec<(String, usize)> = Vec::new();
        for (name, t) in params.iter() {
            if let Some(only) = &self.only {
                if !only.iter().any(|p| name.starts_with(p.as_str())) {
                    continue;
                }
            }
            let n = t.numel();
            match self.max_entries_per_param {
                Some(k) if k < n => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(self.sample_seed ^ stable_hash(name.as_bytes()));
                    let mut idx = sample(&mut rng, n, k).into_vec();
                    idx.sort_unstable();
                    entries.extend(idx.into_iter().map(|i| (name.to_string(), i)));
                }
                _ => entries.extend((0..n).map(|i| (name.to_string(), i))),
            }
        }

        let noise = measure_noise(f, params, &entries, base, &base_sig)?;
        let mut steps = vec![self.eps];
        while steps.last().is_some_and(|&e| e / 2.0 >= MIN_EPS) {
            steps.push(steps.last().unwrap() / 2.0);
        }
        let results: Vec<Option<EntryCheck>> = entries
            .par_iter()
            .map(|(name, i)| -> Result<Option<EntryCheck>> {
                let mut p = params.clone();
                let x0 = p.get(name)?.data()[*i];
                let mut at = |x: f32| -> Result<(f64, bool)> {
                    p.get_mut(name)?.data_mut()[*i] = x;
                    let (v, sig) = eval(f, &p)?;
                    Ok((v, sig == base_sig))
                };
                let analytic = grads.get(name).map_or(0.0, |g| g[*i] as f64);
                // quotient noise must stay below tol/2 of the denominator
                let budget = 0.5 * self.tol as f64 * analytic.abs().max(self.grad_floor as f64);
                for &eps in &steps {
                    if noise / eps as f64 > budget {
                        break;
                    }
                    let (fp, clean_p) = at(x0 + eps)?;
                    let (fm, clean_m) = at(x0 - eps)?;
                    let numeric = if clean_p && clean_m {
                        Some((Stencil::Central, (fp - fm) / ((x0 + eps) as f64 - (x0 - eps) as f64)))
                    } else {
                        // second-order one-sided difference on a clean side
                        let h = eps as f64;
                        let f0 = base;
                        let mut one_sided = None;
                        let one_sided_ok = ONE_SIDED_NOISE * noise / h <= budget;
                        if clean_p && one_sided_ok {
                            let (fpp, clean) = at(x0 + 2.0 * eps)?;
                            if clean {
                                one_sided = Some((Stencil::Forward, (-3.0 * f0 + 4.0 * fp - fpp) / (2.0 * h)));
                            }
                        }
                        if one_sided.is_none() && clean_m && one_sided_ok {
                            let (fmm, clean) = at(x0 - 2.0 * eps)?;
                            if clean {
                                one_sided = Some((Stencil::Backward, (3.0 * f0 - 4.0 * fm + fmm) / (2.0 * h)));
                            }
                        }
                        one_sided
                    };
                    let Some((stencil, numeric)) = numeric else {
                        continue;
                    };
                    let denom = analytic
                        .abs()
                        .max(numeric.abs())
                        .max(self.grad_floor as f64);
                    return Ok(Some(EntryCheck {
                        param: name.clone(),
                        index: *i,
                        analytic,
                        numeric,
                        rel_error: (analytic - numeric).abs() / denom,
                        eps: eps as f64,
                        stencil,
                    }));
                }
                Ok(None)
            })
            .collect::<Result<_>>()?;
        let skipped = results.iter().filter(|r| r.is_none()).count();
        let mut uncovered: Vec<String> = entries
            .iter()
            .zip(&results)
            .filter(|(_, r)| r.is_none())
            .map(|((name, _), _)| name.clone())
            .collect();
        let checks: Vec<EntryCheck> = results.into_iter().flatten().collect();
        uncovered.dedup();
        uncovered.retain(|name| !checks.iter().any(|c| &c.param == name));

        let mut per_param: BTreeMap<String, f64> = BTreeMap::new();
        let mut worst: Option<EntryCheck> = None;
        for c in &checks {
            let e = per_param.entry(c.param.clone()).or_insert(0.0);
            *e = e.max(c.rel_error);
            if worst.as_ref().is_none_or(|w| c.rel_error > w.rel_error) {
                worst = Some(c.clone());
            }
        }
        let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
        Ok(CheckReport {
            checked: checks.len(),
            max_rel_error,
            tol: self.tol as f64,
            passed: max_rel_error <= self.tol as f64
                && uncovered.is_empty()
                && skipped as f64 <= self.max_skip_fraction * entries.len() as f64,
            worst,
            skipped,
            noise,
            per_param,
            uncovered,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(tape: &mut Tape, p: &ParamStore) -> Result<Var> {
        let x = tape.param(p, "x")?;
        let sq = tape.mul(x, x)?;
        Ok(tape.sum(sq))
    }

    #[test]
    fn quadratic_passes_tight_tolerance() {
        let mut p = ParamStore::new(0);
        p.insert("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let r = finite_diff_grad_check(quadratic, &p, 1e-2, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // Scale(x, 2) recorded as a custom op with a deliberately wrong rule.
        struct Wrong;
        impl crate::tensor::tape::CustomBackward for Wrong {
            fn backward(
                &self,
                inputs: &[&Tensor],
                _output: &Tensor,
                g: &[f32],
            ) -> Result<Vec<Option<Vec<f32>>>> {
                Ok(vec![Some(vec![g[0]; inputs[0].numel()])])
            }
        }
        let mut p = ParamStore::new(0);
        p.insert("x", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap())
            .unwrap();
        let f = |tape: &mut Tape, p: &ParamStore| -> Result<Var> {
            let x = tape.param(p, "x")?;
            let doubled = tape.value(x).data().iter().map(|v| v * 2.0).collect();
            let y = tape.custom(&[x], Tensor::new(vec![2], doubled)?, Box::new(Wrong));
            Ok(tape.sum(y))
        };
        let r = finite_diff_grad_check(f, &p, 1e-3, 1e-2).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-3);
    }

    #[test]
    fn nondeterminism_detected() {
        use std::sync::atomic::{AtomicU32, Ordering};
        let calls = AtomicU32::new(0);
        let mut p = ParamStore::new(0);
        p.insert("x", Tensor::scalar(1.0)).unwrap();
        let f = |tape: &mut Tape, p: &ParamStore| -> Result<Var> {
            let x = tape.param(p, "x")?;
            let k = calls.fetch_add(1, Ordering::SeqCst) as f32;
            Ok(tape.scale(x, 1.0 + k))
        };
        assert!(matches!(
            finite_diff_grad_check(f, &p, 1e-3, 1e-2),
            Err(Error::Determinism(_))
        ));
    }

    #[test]
    fn kinks_use_a_clean_side_or_are_skipped() {
        // relu(x) + relu(x − 2e-5): kinks at 0 and 2e-5
        let two_kinks = |tape: &mut Tape, p: &ParamStore| -> Result<Var> {
            let x = tape.param(p, "x")?;
            let n = tape.shape(x)[0];
            let shift = tape.constant(Tensor::new(vec![n], vec![-2e-5; n])?);
            let xs = tape.add(x, shift)?;
            let a = tape.relu(x);
            let b = tape.relu(xs);
            let y = tape.add(a, b)?;
            Ok(tape.sum(y))
        };
        // one kink 1e-5 away: a one-sided stencil is clean
        let mut p = ParamStore::new(0);
        p.insert("x", Tensor::new(vec![3], vec![-1e-5, 0.5, -0.7]).unwrap())
            .unwrap();
        let r = finite_diff_grad_check(two_kinks, &p, 1e-2, 1e-4).unwrap();
        assert_eq!((r.skipped, r.checked), (0, 3));
        assert!(r.passed, "{r:?}");

        // kinks on both sides of 1e-5 at every step: skipped
        p.set("x", Tensor::new(vec![3], vec![1e-5, 0.5, -0.7]).unwrap())
            .unwrap();
        let r = finite_diff_grad_check(two_kinks, &p, 1e-2, 1e-4).unwrap();
        assert_eq!((r.skipped, r.checked), (1, 2));
        assert!(r.passed, "{r:?}");

        let mut q = ParamStore::new(0);
        q.insert("x", Tensor::new(vec![2], vec![1e-5, 1.5e-5]).unwrap())
            .unwrap();
        let r = finite_diff_grad_check(two_kinks, &q, 1e-2, 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.uncovered, vec!["x".to_string()]);
    }

    #[test]
    fn tensor_outputs_are_projected() {
        let mut p = ParamStore::new(0);
        p.insert("x", Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
        let cube = |tape: &mut Tape, p: &ParamStore| -> Result<Var> {
            let x = tape.param(p, "x")?;
            let sq = tape.mul(x, x)?;
            tape.mul(sq, x)
        };
        let r = finite_diff_grad_check(cube, &p, 1e-3, 1e-2).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn eps_domain_enforced() {
        let mut p = ParamStore::new(0);
        p.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            finite_diff_grad_check(quadratic, &p, 0.1, 1e-2),
            Err(Error::Config(_))
        ));
    }
}
