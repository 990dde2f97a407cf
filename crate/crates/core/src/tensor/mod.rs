//! Dense f32 tensors, named parameter storage, and a small reverse-mode
//! autodiff tape covering the operations the fusion model needs.
//!
//! Kernels accumulate in f64 with a fixed reduction order, so results are
//! bit-identical across runs and thread counts.

mod gradcheck;
mod io;
pub mod kernels;
mod tape;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_grad_check, CheckReport, EntryCheck, GradCheckOptions, Stencil};
pub use io::{read_tensor, write_tensor, TENSOR_MAGIC};
pub use tape::{CustomBackward, Gradients, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    /// Uniform samples in `[lo, hi)` from a seeded ChaCha stream.
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[a, b] => Ok((a, b)),
            s => Err(Error::Dimension(format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            s => Err(Error::Dimension(format!("expected rank 3, got {s:?}"))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok((a, b, c, d)),
            s => Err(Error::Dimension(format!("expected rank 4, got {s:?}"))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{what}: element {i} is {}",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "comparing {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Weight gain that keeps activation variance through a ReLU.
pub const RELU_GAIN: f32 = std::f32::consts::SQRT_2;

/// `(kernel, padding)` for a conv with the given stride: 3×3 "same" at
/// stride 1, non-overlapping `s×s` patches otherwise, so any size divisible
/// by the stride maps to an integral output.
pub fn conv_layout(stride: usize) -> (usize, usize) {
    if stride <= 1 {
        (3, 1)
    } else {
        (stride, 0)
    }
}

/// 64-bit FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub(crate) fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Named parameters. Each tensor is initialized from its own ChaCha stream
/// keyed by `(rng_seed, name)`, so values do not depend on allocation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Param(format!("duplicate parameter `{name}`")));
        }
        tensor.set_requires_grad(true);
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Uniform with variance `gain² / fan_in`: the bound is
    /// `gain·sqrt(3 / fan_in)`. [`RELU_GAIN`] preserves activation variance
    /// through a ReLU.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f32) -> Result<()> {
        if fan_in == 0 {
            return Err(Error::Config(format!("parameter `{name}` has zero fan-in")));
        }
        let bound = gain * (3.0 / fan_in as f32).sqrt();
        let seed = self.rng_seed ^ stable_hash(name.as_bytes());
        self.insert(name, Tensor::rand_uniform(shape, -bound, bound, seed))
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    /// `{prefix}.weight` `[co, ci, k, k]` and zero `{prefix}.bias` `[co]`.
    /// Every conv in the model feeds a ReLU, so weights use [`RELU_GAIN`].
    pub fn init_conv(&mut self, prefix: &str, ci: usize, co: usize, k: usize) -> Result<()> {
        self.init_uniform(&format!("{prefix}.weight"), &[co, ci, k, k], ci * k * k, RELU_GAIN)?;
        self.init_zeros(&format!("{prefix}.bias"), &[co])
    }

    /// `{prefix}.weight` `[m, q]` alone; named linear ops treat the missing
    /// bias as zero.
    pub fn init_linear_no_bias(&mut self, prefix: &str, m: usize, q: usize) -> Result<()> {
        self.init_uniform(&format!("{prefix}.weight"), &[m, q], m, 1.0)
    }

    /// `{prefix}.weight` `[m, q]` and zero `{prefix}.bias` `[q]`.
    pub fn init_linear(&mut self, prefix: &str, m: usize, q: usize) -> Result<()> {
        self.init_uniform(&format!("{prefix}.weight"), &[m, q], m, 1.0)?;
        self.init_zeros(&format!("{prefix}.bias"), &[q])
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Param(format!("parameter `{name}` is not initialized")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("parameter `{name}` is not initialized")))
    }

    /// Replaces an existing parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        slot.data.copy_from_slice(tensor.data());
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    /// Stores per-parameter gradients from a backward pass. Parameters
    /// absent from `grads` receive a zero gradient.
    pub fn set_grads(&mut self, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g.clone(),
                None => vec![0.0; t.numel()],
            };
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Raw bytes of every parameter in name order; used for determinism checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.params {
            out.extend_from_slice(name.as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn grad_shape_checked() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.set_grad(vec![1.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        a.init_uniform("w", &[4, 9], 9, 1.0).unwrap();
        b.init_uniform("w", &[4, 9], 9, 1.0).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        let bound = 3f32.sqrt() / 3.0;
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));

        let mut c = ParamStore::new(8);
        c.init_uniform("w", &[4, 9], 9, 1.0).unwrap();
        assert_ne!(a.to_le_bytes(), c.to_le_bytes());
    }

    #[test]
    fn init_variance_is_gain_squared_over_fan_in() {
        let mut p = ParamStore::new(3);
        p.init_uniform("w", &[256, 64], 64, RELU_GAIN).unwrap();
        let d = p.get("w").unwrap().data();
        let var = d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((var / (2.0 / 64.0) - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn init_independent_of_order() {
        let mut a = ParamStore::new(1);
        a.init_uniform("x", &[5], 5, 1.0).unwrap();
        a.init_uniform("y", &[5], 5, 1.0).unwrap();
        let mut b = ParamStore::new(1);
        b.init_uniform("y", &[5], 5, 1.0).unwrap();
        b.init_uniform("x", &[5], 5, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_and_missing_names() {
        let mut s = ParamStore::new(0);
        s.init_zeros("a", &[2]).unwrap();
        assert!(matches!(s.init_zeros("a", &[2]), Err(Error::Param(_))));
        assert!(matches!(s.get("b"), Err(Error::Param(_))));
    }
}
