//! Attention cost accounting and wall-clock comparison of windowed versus
//! masked-global attention.
//!
//! FLOP conventions: a multiply-add is 2, any other arithmetic op (add,
//! compare, exp, divide) is 1. With `K` keys per query (`k²` windowed, `n`
//! global), per head and query:
//!
//! * logits: `K·(2·dq + 2)` (dot product, bias add, scale);
//! * softmax: `5·K` (max, subtract, exp, sum, normalize);
//! * aggregation: `K·2·dv`.
//!
//! Projections (`q`, `k`, `v`, `out`, with biases) are the same for both.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nca::attention::{masked_global_attention_forward, window_attention_forward, WindowGeometry};
use crate::nca::AttentionConfig;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlops {
    pub logits: u64,
    pub softmax: u64,
    pub aggregation: u64,
}

impl AttentionFlops {
    fn with_keys(keys: u64, n: u64, g: &WindowGeometry) -> Self {
        let per_query = |per_key: u64| n * g.heads as u64 * keys * per_key;
        Self {
            logits: per_query(2 * g.dq as u64 + 2),
            softmax: per_query(5),
            aggregation: per_query(2 * g.dv as u64),
        }
    }

    pub fn total(&self) -> u64 {
        self.logits + self.softmax + self.aggregation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Tokens.
    pub n: u64,
    pub k: u64,
    /// Total query/key and value widths (all heads).
    pub q: u64,
    pub v: u64,
    pub heads: u64,
    pub neighborhood: AttentionFlops,
    pub global: AttentionFlops,
    pub projections: u64,
}

impl CostModel {
    pub fn flops_neighborhood(&self) -> u64 {
        self.neighborhood.total() + self.projections
    }

    pub fn flops_global(&self) -> u64 {
        self.global.total() + self.projections
    }

    /// Neighborhood over global logit FLOPs, `k²/n`.
    pub fn logit_ratio(&self) -> f64 {
        self.neighborhood.logits as f64 / self.global.logits as f64
    }
}

/// Exact counts for one attention layer on an `height × width` grid.
pub fn flop_count(cfg: &AttentionConfig, height: usize, width: usize) -> Result<CostModel> {
    let g = cfg.geometry(height, width)?;
    let n = g.tokens() as u64;
    let (m, q, v) = (cfg.token_dim as u64, cfg.qk_dim as u64, cfg.value_dim as u64);
    // q and k: m → q; v: m → v; out: v → m; each a multiply-add per weight plus a bias add
    let projections = n * ((2 * m + 1) * q * 2 + (2 * m + 1) * v + (2 * v + 1) * m);
    Ok(CostModel {
        n,
        k: g.k as u64,
        q,
        v,
        heads: g.heads as u64,
        neighborhood: AttentionFlops::with_keys((g.k * g.k) as u64, n, &g),
        global: AttentionFlops::with_keys(n, n, &g),
        projections,
    })
}

/// Which attention implementation a row times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionImpl {
    Neighborhood,
    MaskedGlobal,
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "impl")]
    pub implementation: AttentionImpl,
    pub height: usize,
    pub width: usize,
    pub n: usize,
    pub k: usize,
    pub repeats: usize,
    pub threads: usize,
    pub median_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
    /// Attention FLOPs without projections (the timed kernels skip them).
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub repeats: usize,
    /// Rayon workers; 1 pins the benchmark to a single worker.
    pub threads: usize,
    /// Max |windowed − masked-global| tolerated before timing.
    pub tolerance: f32,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            threads: 1,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

/// Median, min, max.
fn summarize(mut ns: Vec<u64>) -> (u64, u64, u64) {
    ns.sort_unstable();
    let mid = ns.len() / 2;
    let median = if ns.len() % 2 == 1 {
        ns[mid]
    } else {
        (ns[mid - 1] + ns[mid]) / 2
    };
    (median, ns[0], ns[ns.len() - 1])
}

fn time_runs(repeats: usize, mut run: impl FnMut() -> Result<Vec<f32>>) -> Result<Vec<u64>> {
    std::hint::black_box(run()?);
    (0..repeats)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(run()?);
            Ok(t.elapsed().as_nanos().max(1) as u64)
        })
        .collect()
}

/// For each `(height, width)`: random inputs, an equality check of the two
/// implementations at `opts.tolerance` (aborting on failure), one warm-up
/// run each, then `opts.repeats` timed runs each.
pub fn bench_attention(sizes: &[(usize, usize)], cfg: &AttentionConfig, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.repeats < 5 {
        return Err(Error::Config(format!("repeats {} must be >= 5", opts.repeats)));
    }
    if opts.threads == 0 {
        return Err(Error::Config("threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let mut rows = Vec::new();
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let g = cfg.geometry(h, w)?;
        let cost = flop_count(cfg, h, w)?;
        let n = g.tokens();
        let seed = opts.seed.wrapping_add(4 * i as u64);
        let q = Tensor::rand_uniform(&[n * cfg.qk_dim], -1.0, 1.0, seed).into_data();
        let k = Tensor::rand_uniform(&[n * cfg.qk_dim], -1.0, 1.0, seed + 1).into_data();
        let v = Tensor::rand_uniform(&[n * cfg.value_dim], -1.0, 1.0, seed + 2).into_data();
        let bias = Tensor::rand_uniform(&[g.heads * g.bias_len()], -0.5, 0.5, seed + 3).into_data();

        let (local, _) = pool.install(|| window_attention_forward(&q, &k, &v, &bias, &g))?;
        let global = pool.install(|| masked_global_attention_forward(&q, &k, &v, &bias, &g))?;
        let diff = local
            .iter()
            .zip(&global)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        if !(diff <= opts.tolerance) {
            return Err(Error::Verification(format!(
                "windowed and masked-global attention differ by {diff} on {h}x{w} (tolerance {})",
                opts.tolerance
            )));
        }

        let timed = [
            (AttentionImpl::Neighborhood, cost.neighborhood.total()),
            (AttentionImpl::MaskedGlobal, cost.global.total()),
        ];
        for (which, flops) in timed {
            let ns = pool.install(|| {
                time_runs(opts.repeats, || match which {
                    AttentionImpl::Neighborhood => Ok(window_attention_forward(&q, &k, &v, &bias, &g)?.0),
                    AttentionImpl::MaskedGlobal => masked_global_attention_forward(&q, &k, &v, &bias, &g),
                })
            })?;
            let (median_ns, min_ns, max_ns) = summarize(ns);
            rows.push(BenchRow {
                implementation: which,
                height: h,
                width: w,
                n,
                k: g.k,
                repeats: opts.repeats,
                threads: opts.threads,
                median_ns,
                min_ns,
                max_ns,
                flops,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Internal(format!("bench CSV: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(format!("bench CSV: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(format!("bench CSV: {e}")))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<BenchRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("bench CSV: {e}")))
}

/// Plot data: one line per `n`, columns `n`, then the median ns of each
/// implementation (`-` when missing). Whitespace separated, `#` header.
pub fn plot_series(rows: &[BenchRow]) -> String {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut out = String::from("# n neighborhood_median_ns masked_global_median_ns\n");
    for n in ns {
        let find = |which| {
            rows.iter()
                .find(|r| r.n == n && r.implementation == which)
                .map_or_else(|| "-".to_string(), |r| r.median_ns.to_string())
        };
        out.push_str(&format!(
            "{n} {} {}\n",
            find(AttentionImpl::Neighborhood),
            find(AttentionImpl::MaskedGlobal)
        ));
    }
    out
}
