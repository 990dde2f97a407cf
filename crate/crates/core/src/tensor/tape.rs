use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeometry};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Returns one gradient per input (in input order); `None` means the input
/// does not depend differentiably on the output.
pub trait CustomBackward: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
    ) -> Result<Vec<Option<Vec<f32>>>>;

    /// Identifies which piece of a piecewise-smooth function the forward
    /// pass landed on (e.g. signs at an absolute value). Smooth ops have
    /// none.
    fn branch_signature(&self) -> Vec<u64> {
        Vec::new()
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        m: usize,
        q: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Reshape(Var),
    Transpose2 {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis_sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    SliceAxis0 {
        x: Var,
        start: usize,
        inner: usize,
    },
    Softmax(Var),
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Scatter {
        x: Var,
        cells: Vec<usize>,
        plane: usize,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward values and the operations that produced them; replaying
/// in reverse yields gradients for every parameter leaf.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    exact: HashMap<usize, f64>,
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf touched by the forward pass, by name.
    /// Parameters that did not influence the loss get zeros.
    pub fn param_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f32>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; tape.value(*v).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attaches the f64 value of a scalar node that was computed in higher
    /// precision than its f32 storage. Gradient checks difference this
    /// value, so the final rounding does not set their noise floor.
    pub fn set_exact(&mut self, v: Var, value: f64) -> Result<()> {
        let stored = self.value(v);
        if stored.numel() != 1 {
            return Err(Error::Dimension(format!(
                "exact value attached to a node of shape {:?}",
                stored.shape()
            )));
        }
        let rounded = stored.data()[0] as f64;
        if (rounded - value).abs() > 1e-5 * value.abs().max(1.0) {
            return Err(Error::Internal(format!(
                "exact value {value} disagrees with stored {rounded}"
            )));
        }
        self.exact.insert(v.0, value);
        Ok(())
    }

    pub fn exact(&self, v: Var) -> Option<f64> {
        self.exact.get(&v.0).copied()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value with no gradient (inputs, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf. Repeated lookups of one name return the same `Var`,
    /// so aliased parameters accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters referenced so far, sorted.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ci, h, wd) = self.value(x).dims3()?;
        let (co, wci, kh, kw) = self.value(w).dims4()?;
        if wci != ci {
            return Err(Error::Dimension(format!(
                "conv weight expects {wci} input channels, input has {ci}"
            )));
        }
        if self.value(b).shape() != [co] {
            return Err(Error::Dimension(format!(
                "conv bias shape {:?}, expected [{co}]",
                self.value(b).shape()
            )));
        }
        let geom = ConvGeometry {
            in_channels: ci,
            height: h,
            width: wd,
            out_channels: co,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let (oh, ow) = geom.out_size()?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        )?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![co, oh, ow], out)?,
            Op::Conv2d { x, w, b, geom },
            needs,
        ))
    }

    /// Conv with parameters `{prefix}.weight` / `{prefix}.bias`.
    pub fn conv_named(
        &mut self,
        store: &ParamStore,
        prefix: &str,
        x: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let w = self.param(store, &format!("{prefix}.weight"))?;
        let b = self.param(store, &format!("{prefix}.bias"))?;
        self.conv2d(x, w, b, stride, padding)
    }

    /// Linear layer with parameters `{prefix}.weight` and, when present,
    /// `{prefix}.bias`.
    pub fn linear_named(&mut self, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(store, &format!("{prefix}.weight"))?;
        let bias = format!("{prefix}.bias");
        let b = if store.contains(&bias) {
            self.param(store, &bias)?
        } else {
            let q = self.shape(w).get(1).copied().unwrap_or(0);
            self.constant(Tensor::zeros(&[q]))
        };
        self.linear(x, w, b)
    }

    /// Affine map along the last axis: `[..., m] -> [..., q]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (m, q) = self.value(w).dims2()?;
        if xs.last() != Some(&m) {
            return Err(Error::Dimension(format!(
                "linear weight [{m}, {q}] cannot apply to input {xs:?}"
            )));
        }
        if self.value(b).shape() != [q] {
            return Err(Error::Dimension(format!(
                "linear bias shape {:?}, expected [{q}]",
                self.value(b).shape()
            )));
        }
        let rows = self.value(x).numel() / m.max(1);
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            rows,
            m,
            q,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = q;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear { x, w, b, rows, m, q },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, c), needs)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// `Σ weight_i * scalar_i` over `[1]`-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::Dimension(format!(
                    "weighted_sum term has shape {:?}",
                    self.shape(v)
                )));
            }
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| Error::Input("weighted_sum of no terms".into()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let mut out = out;
        out.clear_grad();
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// `[rows, cols] -> [cols, rows]`.
    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![cols, rows], data)?,
            Op::Transpose2 { x, rows, cols },
            needs,
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of no tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut axis_sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            axis_sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = axis_sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&axis_sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis_sizes,
                outer,
                inner,
            },
            needs,
        ))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_axis0(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::Dimension(format!(
                "slice {start}..{end} of {shape:?}"
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::SliceAxis0 { x, start, inner },
            needs,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Dimension("softmax of a rank-0 tensor".into()))?;
        t.ensure_finite("softmax input")?;
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), n))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    /// Row-group max: `x[N, C]` with groups `offsets[p]..offsets[p+1]` gives
    /// `[P, C]`. Every group must be non-empty.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if offsets.first() != Some(&0) || offsets.last() != Some(&n) {
            return Err(Error::Dimension(format!(
                "segment offsets must span 0..{n}"
            )));
        }
        let groups = offsets.len() - 1;
        let src = self.value(x).data();
        let mut data = vec![0f32; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for p in 0..groups {
            let (s, e) = (offsets[p], offsets[p + 1]);
            if s >= e {
                return Err(Error::Input(format!("segment {p} is empty")));
            }
            for ch in 0..c {
                let mut best = s;
                for r in s + 1..e {
                    if src[r * c + ch] > src[best * c + ch] {
                        best = r;
                    }
                }
                data[p * c + ch] = src[best * c + ch];
                argmax[p * c + ch] = best;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![groups, c], data)?,
            Op::SegmentMax { x, argmax },
            needs,
        ))
    }

    /// Writes row `p` of `x[P, C]` into column `cells[p]` of a zeroed
    /// `[C, height, width]` map. Cells must be distinct.
    pub fn scatter_rows(&mut self, x: Var, cells: &[usize], height: usize, width: usize) -> Result<Var> {
        let (p, c) = self.value(x).dims2()?;
        if cells.len() != p {
            return Err(Error::Dimension(format!(
                "{} cells for {p} rows",
                cells.len()
            )));
        }
        let plane = height * width;
        let mut seen = vec![false; plane];
        for &cell in cells {
            if cell >= plane {
                return Err(Error::Internal(format!("cell {cell} outside {height}x{width}")));
            }
            if std::mem::replace(&mut seen[cell], true) {
                return Err(Error::Internal(format!("cell {cell} assigned twice")));
            }
        }
        let src = self.value(x).data();
        let mut data = vec![0f32; c * plane];
        for (row, &cell) in cells.iter().enumerate() {
            for ch in 0..c {
                data[ch * plane + cell] = src[row * c + ch];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, height, width], data)?,
            Op::Scatter {
                x,
                cells: cells.to_vec(),
                plane,
            },
            needs,
        ))
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            needs,
        )
    }

    /// Every branch taken by the forward pass, packed into words: ReLU
    /// input signs, segment-max winners, and custom-op signatures. Kept
    /// exact rather than hashed, since distinct branch sets could collide.
    /// Two evaluations of one graph with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn branch_signature(&self) -> Vec<u64> {
        let mut words = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => words.extend(
                    self.value(*x)
                        .data()
                        .chunks(64)
                        .map(|c| c.iter().fold(0u64, |w, &v| (w << 1) | (v > 0.0) as u64)),
                ),
                Op::SegmentMax { argmax, .. } => words.extend(argmax.iter().map(|&a| a as u64)),
                Op::Custom { rule, .. } => words.extend(rule.branch_signature()),
                _ => {}
            }
        }
        words
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut params: Vec<(String, Var)> =
            self.params.iter().map(|(k, &v)| (k.clone(), v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                )?;
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::Linear { x, w, b, rows, m, q } => {
                let (gx, gw, gb) = kernels::linear_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    *rows,
                    *m,
                    *q,
                );
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::Relu(x) => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| if y > 0.0 { gy } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Transpose2 { x, rows, cols } => {
                let mut gx = vec![0f32; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        gx[r * cols + c] = g[c * rows + r];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat {
                parts,
                axis_sizes,
                outer,
                inner,
            } => {
                let total: usize = axis_sizes.iter().sum();
                let mut offset = 0;
                for (&p, &sz) in parts.iter().zip(axis_sizes) {
                    let mut gp = Vec::with_capacity(outer * sz * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + sz * inner]);
                    }
                    self.accumulate(grads, p, gp);
                    offset += sz;
                }
            }
            Op::SliceAxis0 { x, start, inner } => {
                let mut gx = vec![0f32; self.value(*x).numel()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let gx = kernels::softmax_rows_backward(node.value.data(), g, n);
                self.accumulate(grads, *x, gx);
            }
            Op::SegmentMax { x, argmax } => {
                let c = node.value.shape()[1];
                let mut gx = vec![0f32; self.value(*x).numel()];
                for (i, &row) in argmax.iter().enumerate() {
                    gx[row * c + i % c] += g[i];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Scatter { x, cells, plane } => {
                let c = node.value.shape()[0];
                let mut gx = vec![0f32; cells.len() * c];
                for (row, &cell) in cells.iter().enumerate() {
                    for ch in 0..c {
                        gx[row * c + ch] = g[ch * plane + cell];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = rule.backward(&vals, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Internal(format!(
                        "custom backward returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        if gv.len() != self.value(v).numel() {
                            return Err(Error::Internal(
                                "custom backward gradient has wrong length".into(),
                            ));
                        }
                        self.accumulate(grads, v, gv);
                    }
                }
            }
        }
        Ok(())
    }
}
