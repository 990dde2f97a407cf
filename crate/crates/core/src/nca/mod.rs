//! Neighborhood cross attention (NCA): static-branch tokens query a k×k
//! neighborhood of dynamic-branch tokens, a parallel windowed self-attention
//! path runs over the static tokens, and a strided conv fuses both.
//!
//! Parameter layout under a block prefix `p`:
//!
//! * `p.tok_s.conv{1,2}`, `p.tok_d.conv{1,2}`: per-branch tokenizers.
//! * `p.cross.*`, `p.self.*`: attention units (`q`, `k` without bias, `v`, `out`,
//!   `rel_bias`, `mlp1`, `mlp2`).
//! * `p.fuse`: the output conv.

pub mod attention;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pillars::BevFeatureMap;
use crate::tensor::{conv_layout, ParamStore, Tape, Tensor, Var};
use attention::{bias_index, window_attention_forward, window_start, WindowAttentionRule, WindowGeometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Window side `k` (odd).
    pub neighborhood: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub qk_dim: usize,
    pub value_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            neighborhood: 7,
            heads: 8,
            token_dim: 64,
            qk_dim: 64,
            value_dim: 64,
        }
    }
}

impl AttentionConfig {
    pub fn new(neighborhood: usize, heads: usize, token_dim: usize) -> Self {
        Self {
            neighborhood,
            heads,
            token_dim,
            qk_dim: token_dim,
            value_dim: token_dim,
        }
    }

    /// Same window and heads, all dims set to `m`.
    pub fn with_token_dim(&self, m: usize) -> Self {
        Self::new(self.neighborhood, self.heads, m)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.neighborhood;
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Config(format!("neighborhood {k} must be odd")));
        }
        if self.heads == 0 || self.token_dim == 0 {
            return Err(Error::Config("heads and token_dim must be >= 1".into()));
        }
        for (name, d) in [("qk_dim", self.qk_dim), ("value_dim", self.value_dim)] {
            if d == 0 || d % self.heads != 0 {
                return Err(Error::Config(format!(
                    "{name} {d} must be a positive multiple of heads {}",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<WindowGeometry> {
        self.validate()?;
        let g = WindowGeometry {
            height,
            width,
            k: self.neighborhood,
            heads: self.heads,
            dq: self.qk_dim / self.heads,
            dv: self.value_dim / self.heads,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSource {
    Static,
    Dynamic,
}

/// Row-major flattened feature map: token `r·w + c` is cell `(r, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// `[h·w, m]`.
    pub tokens: Tensor,
    pub height: usize,
    pub width: usize,
    pub source: TokenSource,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, height: usize, width: usize, source: TokenSource) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if n != height * width {
            return Err(Error::Dimension(format!(
                "{n} tokens for a {height}x{width} grid"
            )));
        }
        Ok(Self {
            tokens,
            height,
            width,
            source,
        })
    }

    /// `[m, h, w]` map to tokens.
    pub fn from_map(map: &Tensor, source: TokenSource) -> Result<Self> {
        let (m, h, w) = map.dims3()?;
        let d = map.data();
        let n = h * w;
        let mut t = vec![0f32; n * m];
        for c in 0..m {
            for i in 0..n {
                t[i * m + c] = d[c * n + i];
            }
        }
        Self::new(Tensor::new(vec![n, m], t)?, h, w, source)
    }

    pub fn to_map(&self) -> Result<Tensor> {
        let (n, m) = self.tokens.dims2()?;
        let d = self.tokens.data();
        let mut out = vec![0f32; n * m];
        for i in 0..n {
            for c in 0..m {
                out[c * n + i] = d[i * m + c];
            }
        }
        Tensor::new(vec![m, self.height, self.width], out)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Per-head bias indexed by the key's offset from the query.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeBias {
    /// `[heads, (2k−1)²]`.
    pub table: Tensor,
    pub k: usize,
}

impl RelativeBias {
    pub fn zeros(heads: usize, k: usize) -> Self {
        Self {
            table: Tensor::zeros(&[heads, (2 * k - 1) * (2 * k - 1)]),
            k,
        }
    }

    pub fn from_params(params: &ParamStore, prefix: &str, cfg: &AttentionConfig) -> Result<Self> {
        let table = params.get(&format!("{prefix}.rel_bias"))?.clone();
        let span = 2 * cfg.neighborhood - 1;
        if table.shape() != [cfg.heads, span * span] {
            return Err(Error::Config(format!(
                "`{prefix}.rel_bias` has shape {:?}, expected [{}, {}]",
                table.shape(),
                cfg.heads,
                span * span
            )));
        }
        Ok(Self {
            table,
            k: cfg.neighborhood,
        })
    }

    pub fn get(&self, head: usize, dr: isize, dc: isize) -> f32 {
        let span = 2 * self.k - 1;
        self.table.data()[head * span * span + bias_index(dr, dc, self.k)]
    }
}

/// Parameters of one attention unit: projections, relative bias and the
/// two-layer MLP that follows the residual.
pub fn init_attention(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    let m = cfg.token_dim;
    store.init_linear(&format!("{prefix}.q"), m, cfg.qk_dim)?;
    // a key bias shifts every logit of a query's window equally, which the
    // softmax cancels: it would be a parameter with identically zero gradient
    store.init_linear_no_bias(&format!("{prefix}.k"), m, cfg.qk_dim)?;
    store.init_linear(&format!("{prefix}.v"), m, cfg.value_dim)?;
    store.init_linear(&format!("{prefix}.out"), cfg.value_dim, m)?;
    let span = 2 * cfg.neighborhood - 1;
    store.init_zeros(&format!("{prefix}.rel_bias"), &[cfg.heads, span * span])?;
    store.init_linear(&format!("{prefix}.mlp1"), m, m)?;
    store.init_linear(&format!("{prefix}.mlp2"), m, m)
}

/// Windowed attention on raw projections `q [n, qk]`, `k [n, qk]`,
/// `v [n, v]` with bias table `[heads, (2k−1)²]`. Output `[n, v]`, heads
/// concatenated.
pub fn window_attention_on(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    bias: Var,
    geometry: WindowGeometry,
) -> Result<Var> {
    let (out, probs) = window_attention_forward(
        tape.value(q).data(),
        tape.value(k).data(),
        tape.value(v).data(),
        tape.value(bias).data(),
        &geometry,
    )?;
    let n = geometry.tokens();
    let out = Tensor::new(vec![n, geometry.heads * geometry.dv], out)?;
    Ok(tape.custom(
        &[q, k, v, bias],
        out,
        Box::new(WindowAttentionRule { geometry, probs }),
    ))
}

/// Project queries from `q_src` and keys/values from `kv_src` (both
/// `[h·w, m]`), attend within each query's window, and project back to `m`.
#[allow(clippy::too_many_arguments)]
pub fn neighborhood_attention_on(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    height: usize,
    width: usize,
    cfg: &AttentionConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<Var> {
    let g = cfg.geometry(height, width)?;
    if tape.shape(q_src) != tape.shape(kv_src) {
        return Err(Error::Config(format!(
            "query tokens {:?} and key/value tokens {:?} differ",
            tape.shape(q_src),
            tape.shape(kv_src)
        )));
    }
    let q = tape.linear_named(params, &format!("{prefix}.q"), q_src)?;
    let k = tape.linear_named(params, &format!("{prefix}.k"), kv_src)?;
    let v = tape.linear_named(params, &format!("{prefix}.v"), kv_src)?;
    let bias = tape.param(params, &format!("{prefix}.rel_bias"))?;
    let a = window_attention_on(tape, q, k, v, bias, g)?;
    tape.linear_named(params, &format!("{prefix}.out"), a)
}

fn check_pair(q_src: &TokenGrid, kv_src: &TokenGrid) -> Result<()> {
    if (q_src.height, q_src.width) != (kv_src.height, kv_src.width) {
        return Err(Error::Config(format!(
            "query grid {}x{} and key/value grid {}x{} differ",
            q_src.height, q_src.width, kv_src.height, kv_src.width
        )));
    }
    Ok(())
}

/// Windowed attention between two token grids, including projections.
pub fn neighborhood_attention(
    q_src: &TokenGrid,
    kv_src: &TokenGrid,
    cfg: &AttentionConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<TokenGrid> {
    check_pair(q_src, kv_src)?;
    let mut tape = Tape::new();
    let q = tape.constant(q_src.tokens.clone());
    let kv = tape.constant(kv_src.tokens.clone());
    let out = neighborhood_attention_on(&mut tape, q, kv, q_src.height, q_src.width, cfg, params, prefix)?;
    TokenGrid::new(tape.value(out).clone(), q_src.height, q_src.width, q_src.source)
}

fn linear_f64(x: &[f64], rows: usize, params: &ParamStore, prefix: &str) -> Result<(Vec<f64>, usize)> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let (m, q) = w.dims2()?;
    let bias = format!("{prefix}.bias");
    let b = if params.contains(&bias) {
        params.get(&bias)?.clone()
    } else {
        Tensor::zeros(&[q])
    };
    if x.len() != rows * m {
        return Err(Error::Dimension(format!(
            "`{prefix}` expects width {m}, input has {} elements for {rows} rows",
            x.len()
        )));
    }
    let (w, b) = (w.data(), b.data());
    let mut out = vec![0f64; rows * q];
    for r in 0..rows {
        for j in 0..q {
            let mut s = b[j] as f64;
            for i in 0..m {
                s += x[r * m + i] * w[i * q + j] as f64;
            }
            out[r * q + j] = s;
        }
    }
    Ok((out, q))
}

/// Reference attention in f64: full `n×n` logits per head, entries outside
/// each query's clamped window set to −∞ when `masked`, then softmax over all
/// `n` keys. Same projections and bias as [`neighborhood_attention`].
pub fn reference_attention(
    q_src: &TokenGrid,
    kv_src: &TokenGrid,
    cfg: &AttentionConfig,
    params: &ParamStore,
    prefix: &str,
    masked: bool,
) -> Result<TokenGrid> {
    check_pair(q_src, kv_src)?;
    let (h, w) = (q_src.height, q_src.width);
    let g = cfg.geometry(h, w)?;
    let bias = RelativeBias::from_params(params, prefix, cfg)?;
    let n = h * w;
    let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (qp, qw) = linear_f64(&to64(&q_src.tokens), n, params, &format!("{prefix}.q"))?;
    let (kp, _) = linear_f64(&to64(&kv_src.tokens), n, params, &format!("{prefix}.k"))?;
    let (vp, vw) = linear_f64(&to64(&kv_src.tokens), n, params, &format!("{prefix}.v"))?;
    let scale = 1.0 / (g.dv as f64).sqrt();
    let mut att = vec![0f64; n * vw];
    for i in 0..n {
        let (r, c) = (i / w, i % w);
        let (rs, cs) = (window_start(r, h, g.k), window_start(c, w, g.k));
        for head in 0..g.heads {
            let mut logits = vec![f64::NEG_INFINITY; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let (jr, jc) = (j / w, j % w);
                let inside = (rs..rs + g.k).contains(&jr) && (cs..cs + g.k).contains(&jc);
                if masked && !inside {
                    continue;
                }
                let s: f64 = (0..g.dq)
                    .map(|d| qp[i * qw + head * g.dq + d] * kp[j * qw + head * g.dq + d])
                    .sum();
                let (dr, dc) = (jr as isize - r as isize, jc as isize - c as isize);
                // offsets beyond the bias table only occur unmasked on grids wider than k
                let b = if dr.unsigned_abs() < g.k && dc.unsigned_abs() < g.k {
                    bias.get(head, dr, dc) as f64
                } else {
                    0.0
                };
                *l = (s + b) * scale;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let denom: f64 = e.iter().sum();
            for (j, &ej) in e.iter().enumerate() {
                let p = ej / denom;
                for d in 0..g.dv {
                    att[i * vw + head * g.dv + d] += p * vp[j * vw + head * g.dv + d];
                }
            }
        }
    }
    let (out, _) = linear_f64(&att, n, params, &format!("{prefix}.out"))?;
    let m = out.len() / n.max(1);
    TokenGrid::new(
        Tensor::new(vec![n, m], out.into_iter().map(|v| v as f32).collect())?,
        h,
        w,
        q_src.source,
    )
}

/// Masked-global attention: the full `n×n` reference restricted by the same
/// windows. Mathematically identical to [`neighborhood_attention`].
pub fn oracle_masked_attention(
    q_src: &TokenGrid,
    kv_src: &TokenGrid,
    cfg: &AttentionConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<TokenGrid> {
    reference_attention(q_src, kv_src, cfg, params, prefix, true)
}

/// Shape of one NCA block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcaConfig {
    pub in_channels: usize,
    /// Paired CNN block output channels `c_o`; tokens have `c_o / 2` dims.
    pub out_channels: usize,
    /// Spatial downsampling of the paired CNN block.
    pub stride: usize,
    /// Window and heads; dims are overridden by the token dim.
    pub attention: AttentionConfig,
}

impl NcaConfig {
    pub fn token_dim(&self) -> usize {
        self.out_channels / 2
    }

    pub fn attention(&self) -> AttentionConfig {
        self.attention.with_token_dim(self.token_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels < 2 || !self.out_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "NCA needs in_channels >= 1 and even out_channels >= 2, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("NCA stride must be >= 1".into()));
        }
        self.attention().validate()
    }
}

pub fn init_tokenizer(store: &mut ParamStore, prefix: &str, in_channels: usize, m: usize) -> Result<()> {
    store.init_conv(&format!("{prefix}.conv1"), in_channels, m, 3)?;
    store.init_conv(&format!("{prefix}.conv2"), m, m, 3)
}

pub fn init_nca(store: &mut ParamStore, prefix: &str, cfg: &NcaConfig) -> Result<()> {
    cfg.validate()?;
    let m = cfg.token_dim();
    init_tokenizer(store, &format!("{prefix}.tok_s"), cfg.in_channels, m)?;
    init_tokenizer(store, &format!("{prefix}.tok_d"), cfg.in_channels, m)?;
    let att = cfg.attention();
    init_attention(store, &format!("{prefix}.cross"), &att)?;
    init_attention(store, &format!("{prefix}.self"), &att)?;
    let (k, _) = conv_layout(cfg.stride);
    store.init_conv(&format!("{prefix}.fuse"), 2 * m, cfg.out_channels, k)
}

/// Two stride-1 3×3 convs with ReLU, then flatten `[m, h, w]` to `[h·w, m]`.
pub fn tokenize_on(tape: &mut Tape, map: Var, params: &ParamStore, prefix: &str, m: usize) -> Result<Var> {
    let (c, h, w) = tape.value(map).dims3()?;
    let wname = format!("{prefix}.conv1.weight");
    let ws = params.get(&wname)?.shape();
    if ws[0] != m || ws[1] != c {
        return Err(Error::Config(format!(
            "tokenizer `{prefix}` maps {} -> {} channels, asked for {c} -> {m}",
            ws[1], ws[0]
        )));
    }
    let x = tape.conv_named(params, &format!("{prefix}.conv1"), map, 1, 1)?;
    let x = tape.relu(x);
    let x = tape.conv_named(params, &format!("{prefix}.conv2"), x, 1, 1)?;
    let x = tape.relu(x);
    let x = tape.reshape(x, &[m, h * w])?;
    tape.transpose2(x)
}

pub fn tokenize(
    map: &BevFeatureMap,
    out_channels: usize,
    params: &ParamStore,
    prefix: &str,
    source: TokenSource,
) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let x = tape.constant(map.data.clone());
    let t = tokenize_on(&mut tape, x, params, prefix, out_channels)?;
    TokenGrid::new(tape.value(t).clone(), map.height(), map.width(), source)
}

/// Attention, residual from the query tokens, then linear → ReLU → linear.
#[allow(clippy::too_many_arguments)]
fn attention_path(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    h: usize,
    w: usize,
    cfg: &AttentionConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<Var> {
    let a = neighborhood_attention_on(tape, q_src, kv_src, h, w, cfg, params, prefix)?;
    let x = tape.add(q_src, a)?;
    let x = tape.linear_named(params, &format!("{prefix}.mlp1"), x)?;
    let x = tape.relu(x);
    tape.linear_named(params, &format!("{prefix}.mlp2"), x)
}

/// One NCA block on `[c_i, H, W]` maps; output `[c_o, H/s, W/s]`.
pub fn nca_on(
    tape: &mut Tape,
    static_map: Var,
    dynamic_map: Var,
    cfg: &NcaConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<Var> {
    cfg.validate()?;
    let (cs, h, w) = tape.value(static_map).dims3()?;
    let (cd, hd, wd) = tape.value(dynamic_map).dims3()?;
    if (h, w) != (hd, wd) {
        return Err(Error::Config(format!(
            "static map {h}x{w} and dynamic map {hd}x{wd} differ in size"
        )));
    }
    if cs != cfg.in_channels || cd != cfg.in_channels {
        return Err(Error::Config(format!(
            "NCA expects {} input channels, got static {cs}, dynamic {cd}",
            cfg.in_channels
        )));
    }
    let m = cfg.token_dim();
    let att = cfg.attention();
    let ts = tokenize_on(tape, static_map, params, &format!("{prefix}.tok_s"), m)?;
    let td = tokenize_on(tape, dynamic_map, params, &format!("{prefix}.tok_d"), m)?;
    let cross = attention_path(tape, ts, td, h, w, &att, params, &format!("{prefix}.cross"))?;
    let selfp = attention_path(tape, ts, ts, h, w, &att, params, &format!("{prefix}.self"))?;
    let both = tape.concat(&[cross, selfp], 1)?;
    let both = tape.transpose2(both)?;
    let both = tape.reshape(both, &[2 * m, h, w])?;
    let (_, pad) = conv_layout(cfg.stride);
    let y = tape.conv_named(params, &format!("{prefix}.fuse"), both, cfg.stride, pad)?;
    Ok(tape.relu(y))
}

pub fn nca_forward(
    static_map: &BevFeatureMap,
    dynamic_map: &BevFeatureMap,
    cfg: &NcaConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<BevFeatureMap> {
    let mut tape = Tape::new();
    let s = tape.constant(static_map.data.clone());
    let d = tape.constant(dynamic_map.data.clone());
    let y = nca_on(&mut tape, s, d, cfg, params, prefix)?;
    BevFeatureMap::new(
        tape.value(y).clone(),
        static_map.stride_meters * cfg.stride as f32,
    )
}
