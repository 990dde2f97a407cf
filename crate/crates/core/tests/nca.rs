use dynstaf::nca::attention::{
    masked_global_attention_forward, window_attention_backward, window_attention_forward,
    WindowGeometry,
};
use dynstaf::nca::{
    init_attention, init_nca, nca_on, neighborhood_attention, neighborhood_attention_on,
    oracle_masked_attention, reference_attention, window_attention_on, AttentionConfig, NcaConfig,
    TokenGrid, TokenSource,
};
use dynstaf::tensor::{GradCheckOptions, ParamStore, Tape, Tensor};

fn grid(h: usize, w: usize, m: usize, seed: u64, source: TokenSource) -> TokenGrid {
    TokenGrid::new(Tensor::rand_uniform(&[h * w, m], -1.0, 1.0, seed), h, w, source).unwrap()
}

/// Attention params with a random (nonzero) relative bias so the bias path
/// is exercised.
fn attention_params(cfg: &AttentionConfig, seed: u64) -> ParamStore {
    let mut p = ParamStore::new(seed);
    init_attention(&mut p, "a", cfg).unwrap();
    let shape = p.get("a.rel_bias").unwrap().shape().to_vec();
    p.set("a.rel_bias", Tensor::rand_uniform(&shape, -0.5, 0.5, seed + 100))
        .unwrap();
    p
}

#[test]
fn windowed_matches_masked_global_reference() {
    for k in [1, 3, 5, 7] {
        for heads in [1, 2, 8] {
            for seed in 0..5 {
                let cfg = AttentionConfig::new(k, heads, 16);
                let p = attention_params(&cfg, seed);
                let qs = grid(8, 8, 16, 10 + seed, TokenSource::Static);
                let kv = grid(8, 8, 16, 20 + seed, TokenSource::Dynamic);
                let a = neighborhood_attention(&qs, &kv, &cfg, &p, "a").unwrap();
                let b = oracle_masked_attention(&qs, &kv, &cfg, &p, "a").unwrap();
                let d = a.tokens.max_abs_diff(&b.tokens).unwrap();
                assert!(d <= 1e-5, "k={k} heads={heads} seed={seed}: {d}");
            }
        }
    }
}

#[test]
fn f32_masked_global_kernel_matches_window_kernel() {
    for (h, w, k) in [(8, 8, 3), (9, 7, 5), (16, 16, 7)] {
        let g = WindowGeometry {
            height: h,
            width: w,
            k,
            heads: 2,
            dq: 4,
            dv: 3,
        };
        let n = h * w;
        let q = Tensor::rand_uniform(&[n, 8], -1.0, 1.0, 1);
        let kk = Tensor::rand_uniform(&[n, 8], -1.0, 1.0, 2);
        let v = Tensor::rand_uniform(&[n, 6], -1.0, 1.0, 3);
        let b = Tensor::rand_uniform(&[2, g.bias_len()], -1.0, 1.0, 4);
        let (a, _) = window_attention_forward(q.data(), kk.data(), v.data(), b.data(), &g).unwrap();
        let m = masked_global_attention_forward(q.data(), kk.data(), v.data(), b.data(), &g).unwrap();
        let d = a.iter().zip(&m).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(d <= 1e-5, "{h}x{w} k={k}: {d}");
    }
}

#[test]
fn window_covering_grid_equals_global_attention() {
    let cfg = AttentionConfig::new(5, 2, 8);
    let p = attention_params(&cfg, 3);
    let qs = grid(5, 5, 8, 1, TokenSource::Static);
    let kv = grid(5, 5, 8, 2, TokenSource::Dynamic);
    let masked = oracle_masked_attention(&qs, &kv, &cfg, &p, "a").unwrap();
    let global = reference_attention(&qs, &kv, &cfg, &p, "a", false).unwrap();
    assert!(masked.tokens.max_abs_diff(&global.tokens).unwrap() < 1e-12);
}

#[test]
fn oracle_single_key_window_matches() {
    let cfg = AttentionConfig::new(1, 1, 4);
    let p = attention_params(&cfg, 8);
    let qs = grid(4, 4, 4, 1, TokenSource::Static);
    let kv = grid(4, 4, 4, 2, TokenSource::Dynamic);
    let a = neighborhood_attention(&qs, &kv, &cfg, &p, "a").unwrap();
    let b = oracle_masked_attention(&qs, &kv, &cfg, &p, "a").unwrap();
    assert!(a.tokens.max_abs_diff(&b.tokens).unwrap() < 1e-6);
}

#[test]
fn zero_logits_average_the_window_values() {
    let g = WindowGeometry {
        height: 3,
        width: 3,
        k: 3,
        heads: 1,
        dq: 2,
        dv: 3,
    };
    let q = vec![0f32; 9 * 2];
    let k = Tensor::rand_uniform(&[9, 2], -1.0, 1.0, 1);
    let v = Tensor::rand_uniform(&[9, 3], -1.0, 1.0, 2);
    let bias = vec![0f32; g.bias_len()];
    let (out, _) = window_attention_forward(&q, k.data(), v.data(), &bias, &g).unwrap();
    for d in 0..3 {
        let mean: f64 = (0..9).map(|j| v.data()[j * 3 + d] as f64).sum::<f64>() / 9.0;
        for i in 0..9 {
            assert!((out[i * 3 + d] as f64 - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn far_key_perturbation_leaves_interior_query_bit_identical() {
    let k = 3;
    let cfg = AttentionConfig::new(k, 2, 8);
    let p = attention_params(&cfg, 4);
    let qs = grid(9, 9, 8, 1, TokenSource::Static);
    let kv = grid(9, 9, 8, 2, TokenSource::Dynamic);
    let base = neighborhood_attention(&qs, &kv, &cfg, &p, "a").unwrap();
    let (qr, qc) = (4usize, 4usize);
    for (r, c) in [(4usize, 6usize), (1, 1), (8, 4), (2, 7)] {
        let cheb = (r as isize - qr as isize).abs().max((c as isize - qc as isize).abs());
        assert!(cheb > (k as isize - 1) / 2);
        let mut moved = kv.clone();
        for x in &mut moved.tokens.data_mut()[(r * 9 + c) * 8..(r * 9 + c + 1) * 8] {
            *x += 3.0;
        }
        let out = neighborhood_attention(&qs, &moved, &cfg, &p, "a").unwrap();
        let i = qr * 9 + qc;
        let a = &base.tokens.data()[i * 8..(i + 1) * 8];
        let b = &out.tokens.data()[i * 8..(i + 1) * 8];
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // a perturbation inside the window does reach the query
    let mut near = kv.clone();
    near.tokens.data_mut()[(5 * 9 + 5) * 8] += 3.0;
    let out = neighborhood_attention(&qs, &near, &cfg, &p, "a").unwrap();
    assert_ne!(
        &base.tokens.data()[40 * 8..41 * 8],
        &out.tokens.data()[40 * 8..41 * 8]
    );
}

#[test]
fn translation_moves_interior_outputs() {
    let (h, w, m, k) = (10, 10, 4, 3);
    let cfg = AttentionConfig::new(k, 2, m);
    let p = attention_params(&cfg, 6);
    let qs = grid(h, w, m, 1, TokenSource::Static);
    let kv = grid(h, w, m, 2, TokenSource::Dynamic);
    let shift = |g: &TokenGrid| {
        let mut t = Tensor::zeros(&[h * w, m]);
        for r in 0..h {
            for c in 1..w {
                let (dst, src) = ((r * w + c) * m, (r * w + c - 1) * m);
                t.data_mut()[dst..dst + m].copy_from_slice(&g.tokens.data()[src..src + m]);
            }
        }
        TokenGrid::new(t, h, w, g.source).unwrap()
    };
    let a = neighborhood_attention(&qs, &kv, &cfg, &p, "a").unwrap();
    let b = neighborhood_attention(&shift(&qs), &shift(&kv), &cfg, &p, "a").unwrap();
    let half = k / 2;
    for r in half..h - half {
        // windows of columns c and c+1 both stay clear of the borders and of
        // the zero column introduced by the shift
        for c in half + 1..w - half - 1 {
            let i = (r * w + c) * m;
            let j = (r * w + c + 1) * m;
            for d in 0..m {
                let (x, y) = (a.tokens.data()[i + d], b.tokens.data()[j + d]);
                assert!((x - y).abs() < 1e-6, "({r},{c}): {x} vs {y}");
            }
        }
    }
}

/// Independent f64 windowed attention: loss `Σ r·out` for raw projections.
fn window_loss_f64(q: &[f64], k: &[f64], v: &[f64], b: &[f64], r: &[f64], g: &WindowGeometry) -> f64 {
    let (h, w, kk) = (g.height as isize, g.width as isize, g.k as isize);
    let half = kk / 2;
    let span = 2 * kk - 1;
    let (qw, vw) = (g.heads * g.dq, g.heads * g.dv);
    let mut loss = 0.0;
    for i in 0..h * w {
        let (row, col) = (i / w, i % w);
        let rs = (row - half).clamp(0, h - kk);
        let cs = (col - half).clamp(0, w - kk);
        for head in 0..g.heads {
            let mut keys = Vec::new();
            let mut logits = Vec::new();
            for jr in rs..rs + kk {
                for jc in cs..cs + kk {
                    let j = (jr * w + jc) as usize;
                    let dot: f64 = (0..g.dq)
                        .map(|d| q[i as usize * qw + head * g.dq + d] * k[j * qw + head * g.dq + d])
                        .sum();
                    let bi = ((jr - row + kk - 1) * span + (jc - col + kk - 1)) as usize;
                    let bias = b[head * (span * span) as usize + bi];
                    logits.push((dot + bias) / (g.dv as f64).sqrt());
                    keys.push(j);
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..g.dv {
                let o: f64 = keys
                    .iter()
                    .zip(&e)
                    .map(|(&j, &ej)| ej / z * v[j * vw + head * g.dv + d])
                    .sum();
                loss += r[i as usize * vw + head * g.dv + d] * o;
            }
        }
    }
    loss
}

#[test]
fn attention_backward_matches_f64_finite_differences() {
    let g = WindowGeometry {
        height: 5,
        width: 6,
        k: 3,
        heads: 2,
        dq: 2,
        dv: 3,
    };
    let n = g.tokens();
    for seed in 0..5 {
        let q = Tensor::rand_uniform(&[n, 4], -1.0, 1.0, seed * 10 + 1);
        let k = Tensor::rand_uniform(&[n, 4], -1.0, 1.0, seed * 10 + 2);
        let v = Tensor::rand_uniform(&[n, 6], -1.0, 1.0, seed * 10 + 3);
        let b = Tensor::rand_uniform(&[2, g.bias_len()], -0.5, 0.5, seed * 10 + 4);
        let r = Tensor::rand_uniform(&[n, 6], -1.0, 1.0, seed * 10 + 5);
        let (_, probs) = window_attention_forward(q.data(), k.data(), v.data(), b.data(), &g).unwrap();
        let (gq, gk, gv, gb) =
            window_attention_backward(q.data(), k.data(), v.data(), &probs, r.data(), &g);

        let to64 = |t: &Tensor| t.data().iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let mut inputs = [to64(&q), to64(&k), to64(&v), to64(&b)];
        let r64 = to64(&r);
        let analytic = [gq, gk, gv, gb];
        let eps = 1e-6;
        let mut worst = 0f64;
        for which in 0..4 {
            for idx in 0..inputs[which].len() {
                let x0 = inputs[which][idx];
                inputs[which][idx] = x0 + eps;
                let fp = window_loss_f64(&inputs[0], &inputs[1], &inputs[2], &inputs[3], &r64, &g);
                inputs[which][idx] = x0 - eps;
                let fm = window_loss_f64(&inputs[0], &inputs[1], &inputs[2], &inputs[3], &r64, &g);
                inputs[which][idx] = x0;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[which][idx] as f64;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-3, "seed {seed}: {worst}");
    }
}

#[test]
fn attention_tape_gradients_match_finite_differences() {
    let g = WindowGeometry {
        height: 5,
        width: 5,
        k: 3,
        heads: 2,
        dq: 2,
        dv: 2,
    };
    let n = g.tokens();
    let mut p = ParamStore::new(0);
    p.insert("q", Tensor::rand_uniform(&[n, 4], -1.0, 1.0, 1)).unwrap();
    p.insert("k", Tensor::rand_uniform(&[n, 4], -1.0, 1.0, 2)).unwrap();
    p.insert("v", Tensor::rand_uniform(&[n, 4], -1.0, 1.0, 3)).unwrap();
    p.insert("b", Tensor::rand_uniform(&[2, g.bias_len()], -0.5, 0.5, 4)).unwrap();
    let report = GradCheckOptions::new(1e-2, 1e-2)
        .run(
            |tape, params| {
                let q = tape.param(params, "q")?;
                let k = tape.param(params, "k")?;
                let v = tape.param(params, "v")?;
                let b = tape.param(params, "b")?;
                window_attention_on(tape, q, k, v, b, g)
            },
            &p,
        )
        .unwrap();
    assert!(report.passed, "{:?}", report.worst);
    assert_eq!(report.skipped, 0);
}

#[test]
fn self_attention_gradients_through_shared_source() {
    let cfg = AttentionConfig::new(3, 2, 4);
    let mut p = attention_params(&cfg, 2);
    p.insert("x", Tensor::rand_uniform(&[16, 4], -1.0, 1.0, 7)).unwrap();
    let report = GradCheckOptions::new(1e-2, 1e-2)
        .run(
            |tape, params| {
                let x = tape.param(params, "x")?;
                neighborhood_attention_on(tape, x, x, 4, 4, &cfg, params, "a")
            },
            &p,
        )
        .unwrap();
    assert!(report.passed, "{report:?}");
}

fn block_setup(channels: usize, seed: u64) -> (NcaConfig, ParamStore) {
    let cfg = NcaConfig {
        in_channels: channels,
        out_channels: channels,
        stride: 2,
        attention: AttentionConfig::new(3, 2, 0),
    };
    let mut p = ParamStore::new(seed);
    init_nca(&mut p, "nca", &cfg).unwrap();
    for prefix in ["nca.cross.rel_bias", "nca.self.rel_bias"] {
        let shape = p.get(prefix).unwrap().shape().to_vec();
        p.set(prefix, Tensor::rand_uniform(&shape, -0.3, 0.3, seed + 1)).unwrap();
    }
    p.insert("in.static", Tensor::rand_uniform(&[channels, 8, 8], -1.0, 1.0, seed + 2))
        .unwrap();
    p.insert("in.dynamic", Tensor::rand_uniform(&[channels, 8, 8], -1.0, 1.0, seed + 3))
        .unwrap();
    (cfg, p)
}

#[test]
fn nca_block_gradients_match_finite_differences() {
    let (cfg, p) = block_setup(16, 11);
    let report = GradCheckOptions::new(1e-2, 1e-2)
        .sampled(24, 5)
        .run(
            |tape, params| {
                let s = tape.param(params, "in.static")?;
                let d = tape.param(params, "in.dynamic")?;
                nca_on(tape, s, d, &cfg, params, "nca")
            },
            &p,
        )
        .unwrap();
    assert!(report.passed, "{:?} checked {} skipped {} uncovered {:?}", report.worst, report.checked, report.skipped, report.uncovered);
    assert!(report.per_param.contains_key("nca.cross.rel_bias"));
}

#[test]
fn zero_dynamic_input_makes_output_independent_of_key_value_weights() {
    let (cfg, mut p) = block_setup(8, 3);
    for name in ["nca.cross.rel_bias", "nca.self.rel_bias"] {
        let shape = p.get(name).unwrap().shape().to_vec();
        p.set(name, Tensor::zeros(&shape)).unwrap();
    }
    let run = |p: &ParamStore| {
        let mut tape = Tape::new();
        let s = tape.constant(p.get("in.static").unwrap().clone());
        let d = tape.constant(Tensor::zeros(&[8, 8, 8]));
        let y = nca_on(&mut tape, s, d, &cfg, p, "nca").unwrap();
        tape.value(y).clone()
    };
    let base = run(&p);
    let mut q = p.clone();
    for name in ["nca.cross.k.weight", "nca.cross.v.weight", "nca.tok_d.conv1.weight"] {
        let shape = q.get(name).unwrap().shape().to_vec();
        q.set(name, Tensor::rand_uniform(&shape, -2.0, 2.0, 99)).unwrap();
    }
    assert_eq!(run(&q), base);
}

#[test]
fn cross_attention_injects_dynamic_features() {
    let (cfg, p) = block_setup(8, 4);
    let run = |dynamic: Tensor| {
        let mut tape = Tape::new();
        let s = tape.constant(p.get("in.static").unwrap().clone());
        let d = tape.constant(dynamic);
        let y = nca_on(&mut tape, s, d, &cfg, &p, "nca").unwrap();
        tape.value(y).clone()
    };
    let a = run(p.get("in.dynamic").unwrap().clone());
    let b = run(Tensor::zeros(&[8, 8, 8]));
    assert!(a.max_abs_diff(&b).unwrap() > 1e-4);
}
