use dynstaf::bench::{
    bench_attention, flop_count, plot_series, rows_from_csv, rows_to_csv, AttentionImpl, BenchOptions,
};
use dynstaf::nca::AttentionConfig;
use proptest::prelude::*;

/// Walks the windowed or global loop nest and tallies every op by the
/// module's conventions: (logits, softmax, aggregation).
fn counted(cfg: &AttentionConfig, h: usize, w: usize, global: bool) -> (u64, u64, u64) {
    let (k, heads) = (cfg.neighborhood, cfg.heads);
    let (dq, dv) = (cfg.qk_dim / heads, cfg.value_dim / heads);
    let (mut logits, mut softmax, mut agg) = (0u64, 0u64, 0u64);
    for _query in 0..h * w {
        for _head in 0..heads {
            let keys = if global { h * w } else { k * k };
            for _key in 0..keys {
                for _d in 0..dq {
                    logits += 2;
                }
                logits += 2;
                softmax += 5;
                for _d in 0..dv {
                    agg += 2;
                }
            }
        }
    }
    (logits, softmax, agg)
}

#[test]
fn counts_match_a_loop_tally() {
    for (k, heads, m, h, w) in [(3, 1, 4, 5, 6), (5, 2, 8, 7, 5), (1, 4, 8, 3, 3)] {
        let cfg = AttentionConfig::new(k, heads, m);
        let c = flop_count(&cfg, h, w).unwrap();
        let nb = c.neighborhood;
        let gl = c.global;
        assert_eq!((nb.logits, nb.softmax, nb.aggregation), counted(&cfg, h, w, false));
        assert_eq!((gl.logits, gl.softmax, gl.aggregation), counted(&cfg, h, w, true));
    }
}

#[test]
fn logit_ratio_at_the_reference_size_is_exact() {
    let cfg = AttentionConfig::new(7, 8, 64);
    let c = flop_count(&cfg, 64, 64).unwrap();
    assert_eq!(c.n, 4096);
    // k²/n = 49/4096 exactly, in integers
    assert_eq!(c.neighborhood.logits * 4096, c.global.logits * 49);
    assert!((c.logit_ratio() - 49.0 / 4096.0).abs() < 1e-15);
}

#[test]
fn window_covering_the_grid_costs_the_same_as_global() {
    let cfg = AttentionConfig::new(5, 2, 8);
    let c = flop_count(&cfg, 5, 5).unwrap();
    assert_eq!(c.neighborhood, c.global);
    assert_eq!(c.flops_neighborhood(), c.flops_global());
}

#[test]
fn doubling_tokens_doubles_windowed_and_quadruples_global_logits() {
    let cfg = AttentionConfig::new(7, 8, 64);
    let a = flop_count(&cfg, 32, 32).unwrap();
    let b = flop_count(&cfg, 32, 64).unwrap();
    assert_eq!(b.flops_neighborhood(), 2 * a.flops_neighborhood());
    assert_eq!(b.global.logits, 4 * a.global.logits);
}

#[test]
fn grid_smaller_than_the_window_is_rejected() {
    assert!(flop_count(&AttentionConfig::new(7, 1, 8), 6, 16).is_err());
}

#[test]
fn benchmark_rows_are_positive_and_grow_with_n() {
    let cfg = AttentionConfig::new(3, 2, 16);
    let sizes = [(8, 8), (16, 16), (32, 32)];
    let rows = bench_attention(&sizes, &cfg, &BenchOptions::default()).unwrap();
    assert_eq!(rows.len(), 2 * sizes.len());
    for which in [AttentionImpl::Neighborhood, AttentionImpl::MaskedGlobal] {
        let r: Vec<_> = rows.iter().filter(|r| r.implementation == which).collect();
        for x in &r {
            assert!(x.min_ns > 0 && x.min_ns <= x.median_ns && x.median_ns <= x.max_ns);
            assert_eq!((x.repeats, x.threads), (5, 1));
        }
        // n grows 4× per step; the windowed cost grows 4×, the global 16×
        for w in r.windows(2) {
            assert!(w[1].n > w[0].n);
            assert!(w[1].median_ns >= w[0].median_ns, "{which:?}: {} then {}", w[0].median_ns, w[1].median_ns);
        }
    }
}

#[test]
fn benchmark_csv_round_trips() {
    let cfg = AttentionConfig::new(3, 1, 4);
    let rows = bench_attention(&[(4, 4), (6, 6)], &cfg, &BenchOptions::default()).unwrap();
    let csv = rows_to_csv(&rows).unwrap();
    assert!(csv.starts_with("impl,height,width,n,k,repeats,threads,median_ns,min_ns,max_ns,flops\n"));
    assert_eq!(rows_from_csv(&csv).unwrap(), rows);
    let plot = plot_series(&rows);
    assert_eq!(plot.lines().count(), 3);
    assert!(plot.lines().nth(1).unwrap().starts_with("16 "));
}

#[test]
fn benchmark_refuses_too_few_repeats() {
    let opts = BenchOptions {
        repeats: 4,
        ..BenchOptions::default()
    };
    assert!(bench_attention(&[(4, 4)], &AttentionConfig::new(3, 1, 4), &opts).is_err());
}

#[test]
fn equality_gate_aborts_before_timing() {
    // a negative tolerance cannot be met, so the equality gate must fire
    let opts = BenchOptions {
        tolerance: -1.0,
        ..BenchOptions::default()
    };
    let err = bench_attention(&[(4, 4)], &AttentionConfig::new(3, 1, 4), &opts).unwrap_err();
    assert!(matches!(err, dynstaf::Error::Verification(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windowed_never_exceeds_global(k in 0usize..4, heads in 1usize..4, dim in 1usize..4, h in 7usize..20, w in 7usize..20) {
        let k = 2 * k + 1;
        let cfg = AttentionConfig::new(k, heads, heads * dim);
        let c = flop_count(&cfg, h, w).unwrap();
        prop_assert!(c.flops_neighborhood() <= c.flops_global());
        prop_assert_eq!(c.neighborhood.logits * (h * w) as u64, c.global.logits * (k * k) as u64);
    }
}
