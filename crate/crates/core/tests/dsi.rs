use dynstaf::dsi::{dsi_forward, dsi_on, init_dsi};
use dynstaf::pillars::BevFeatureMap;
use dynstaf::tensor::{GradCheckOptions, ParamStore, Tape, Tensor};

const C: usize = 8;

fn map(seed: u64) -> BevFeatureMap {
    BevFeatureMap::new(Tensor::rand_uniform(&[C, 8, 8], -1.0, 1.0, seed), 0.4).unwrap()
}

fn params(seed: u64) -> ParamStore {
    let mut p = ParamStore::new(seed);
    init_dsi(&mut p, "dsi", C).unwrap();
    // nonzero biases so no path is trivially inert
    let names: Vec<String> = p.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
    for (i, n) in names.iter().enumerate() {
        let shape = p.get(n).unwrap().shape().to_vec();
        p.set(n, Tensor::rand_uniform(&shape, -0.1, 0.1, 1000 + i as u64)).unwrap();
    }
    p
}

/// Reorders the input-channel blocks of a conv weight `[co, ci, k, k]`.
fn permute_input_blocks(w: &Tensor, block: usize, order: &[usize]) -> Tensor {
    let s = w.shape().to_vec();
    let (co, ci, kk) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0f32; w.numel()];
    for o in 0..co {
        for (dst_block, &src_block) in order.iter().enumerate() {
            for c in 0..block {
                let src = (o * ci + src_block * block + c) * kk;
                let dst = (o * ci + dst_block * block + c) * kk;
                out[dst..dst + kk].copy_from_slice(&w.data()[src..src + kk]);
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

#[test]
fn swapping_branches_and_their_parameters_is_a_symmetry() {
    let p = params(3);
    let mut q = p.clone();
    for (a, b) in [
        ("dsi.s", "dsi.d"),
        ("dsi.inter_s.conv1", "dsi.inter_d.conv1"),
        ("dsi.inter_s.conv2", "dsi.inter_d.conv2"),
    ] {
        for suffix in ["weight", "bias"] {
            let (na, nb) = (format!("{a}.{suffix}"), format!("{b}.{suffix}"));
            q.set(&na, p.get(&nb).unwrap().clone()).unwrap();
            q.set(&nb, p.get(&na).unwrap().clone()).unwrap();
        }
    }
    q.set("dsi.c.weight", permute_input_blocks(p.get("dsi.c.weight").unwrap(), C, &[1, 0]))
        .unwrap();
    q.set(
        "dsi.out.conv1.weight",
        permute_input_blocks(p.get("dsi.out.conv1.weight").unwrap(), C, &[1, 0, 2]),
    )
    .unwrap();

    let (s, d) = (map(1), map(2));
    let a = dsi_forward(&s, &d, &p, "dsi").unwrap();
    let b = dsi_forward(&d, &s, &q, "dsi").unwrap();
    assert!(a.data.max_abs_diff(&b.data).unwrap() < 1e-6);
    // without the parameter swap the outputs differ
    let c = dsi_forward(&d, &s, &p, "dsi").unwrap();
    assert!(a.data.max_abs_diff(&c.data).unwrap() > 1e-4);
}

#[test]
fn output_depends_on_both_branches() {
    let p = params(4);
    let (s, d) = (map(1), map(2));
    let base = dsi_forward(&s, &d, &p, "dsi").unwrap();
    let mut s2 = s.clone();
    s2.data.data_mut()[5 * 64 + 27] += 0.5;
    let mut d2 = d.clone();
    d2.data.data_mut()[3 * 64 + 36] += 0.5;
    assert!(dsi_forward(&s2, &d, &p, "dsi").unwrap().data.max_abs_diff(&base.data).unwrap() > 0.0);
    assert!(dsi_forward(&s, &d2, &p, "dsi").unwrap().data.max_abs_diff(&base.data).unwrap() > 0.0);
}

#[test]
fn gradients_match_finite_differences_and_reach_both_inputs() {
    let mut p = params(5);
    p.insert("in.static", map(11).data).unwrap();
    p.insert("in.dynamic", map(12).data).unwrap();
    let f = |tape: &mut Tape, params: &ParamStore| {
        let s = tape.param(params, "in.static")?;
        let d = tape.param(params, "in.dynamic")?;
        Ok(dsi_on(tape, s, d, params, "dsi")?.f_o)
    };
    let report = GradCheckOptions::new(1e-2, 1e-2)
        .sampled(32, 3)
        .run(f, &p)
        .unwrap();
    assert!(report.passed, "{:?} checked {} skipped {} uncovered {:?}", report.worst, report.checked, report.skipped, report.uncovered);

    let mut tape = Tape::new();
    let y = f(&mut tape, &p).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap().param_grads(&tape);
    for input in ["in.static", "in.dynamic"] {
        assert!(grads[input].iter().any(|&g| g != 0.0), "{input} got no gradient");
    }
}
