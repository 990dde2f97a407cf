use std::collections::BTreeMap;

use dynstaf::pillars::*;
use dynstaf::synthlidar::{aggregate_sweeps, generate_scene, simulate_sequence, AggregatedCloud};
use dynstaf::tensor::{ParamStore, Tensor};
use dynstaf::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cloud(points: Vec<[f32; 5]>) -> AggregatedCloud {
    AggregatedCloud {
        points,
        labels: Vec::new(),
    }
}

fn scene_cloud(seed: u64) -> AggregatedCloud {
    let scene = generate_scene(seed, 5, 12.0).unwrap();
    aggregate_sweeps(&simulate_sequence(&scene, 10).unwrap()).unwrap()
}

/// Brute-force bucketing: flat cell index to point count, in-range only.
fn bucket(points: &[[f32; 5]], g: &GridConfig) -> BTreeMap<usize, usize> {
    let width = ((g.x_range[1] - g.x_range[0]) as f64 / g.pillar_size as f64).round() as usize;
    let mut out = BTreeMap::new();
    for p in points {
        let inside = |v: f32, r: [f32; 2]| r[0] <= v && v < r[1];
        if inside(p[0], g.x_range) && inside(p[1], g.y_range) && inside(p[2], g.z_range) {
            let ix = ((p[0] - g.x_range[0]) / g.pillar_size).floor() as usize;
            let iy = ((p[1] - g.y_range[0]) / g.pillar_size).floor() as usize;
            *out.entry(iy * width + ix).or_default() += 1;
        }
    }
    out
}

fn counts(set: &PillarSet) -> BTreeMap<usize, usize> {
    set.pillars.iter().map(|p| (p.cell, p.raw_count)).collect()
}

#[test]
fn five_points_in_two_cells() {
    let g = GridConfig::square(3.2, 0.4);
    let pts = vec![
        [0.1, 0.1, 0.0, 0.5, 0.0],
        [0.2, 0.3, 0.5, 0.5, -0.05],
        [0.35, 0.05, 1.0, 0.5, -0.1],
        [-1.0, 2.1, 0.0, 0.5, 0.0],
        [-0.9, 2.2, 0.2, 0.5, 0.0],
    ];
    let set = pillarize(&cloud(pts.clone()), &g).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.kept_points(), 5);
    assert_eq!(counts(&set), bucket(&pts, &g));
    // cell (8, 8) holds the first three points
    assert_eq!(set.pillars.iter().find(|p| (p.ix, p.iy) == (8, 8)).unwrap().points.len(), 3);
}

#[test]
fn desk_scene_bucketing_matches_oracle() {
    let g = GridConfig {
        max_points_per_pillar: usize::MAX,
        ..GridConfig::desk()
    };
    let c = scene_cloud(3);
    let set = pillarize(&c, &g).unwrap();
    let oracle = bucket(&c.points, &g);
    assert_eq!(counts(&set), oracle);
    assert_eq!(set.in_range_points, oracle.values().sum::<usize>());
    assert_eq!(set.kept_points(), set.in_range_points);
}

#[test]
fn truncation_caps_points_and_pillars() {
    let g = GridConfig {
        max_points_per_pillar: 4,
        max_pillars: 50,
        ..GridConfig::desk()
    };
    let c = scene_cloud(1);
    let set = pillarize(&c, &g).unwrap();
    assert_eq!(set.len(), 50);
    assert!(set.pillars.iter().all(|p| p.points.len() == p.raw_count.min(4)));
    let kept: usize = set.pillars.iter().map(|p| p.raw_count).sum();
    assert!(set.kept_points() <= kept);
    // the most occupied cells survive
    let mut all: Vec<usize> = bucket(&c.points, &g).into_values().collect();
    all.sort_unstable_by(|a, b| b.cmp(a));
    let least_kept = set.pillars.iter().map(|p| p.raw_count).min().unwrap();
    assert!(least_kept >= all[49]);
}

proptest! {
    #[test]
    fn points_are_conserved(
        pts in prop::collection::vec((-4.0f32..4.0, -4.0f32..4.0, -6.0f32..4.0, 0.0f32..1.0), 0..300)
    ) {
        let g = GridConfig {
            max_points_per_pillar: usize::MAX,
            ..GridConfig::square(3.2, 0.4)
        };
        let pts: Vec<[f32; 5]> = pts.into_iter().map(|(x, y, z, i)| [x, y, z, i, 0.0]).collect();
        let set = pillarize(&cloud(pts.clone()), &g).unwrap();
        let oracle = bucket(&pts, &g);
        prop_assert_eq!(counts(&set), oracle.clone());
        prop_assert_eq!(set.kept_points(), oracle.values().sum::<usize>());
    }
}

fn vfe_params(channels: usize, seed: u64) -> ParamStore {
    let mut p = ParamStore::new(seed);
    init_vfe(&mut p, "vfe", channels).unwrap();
    p.set("vfe.bias", Tensor::rand_uniform(&[channels], -0.2, 0.2, seed + 1)).unwrap();
    p
}

/// Per-point loop in f64: decorate, affine, ReLU, running max. Decorated
/// features are rounded to f32 because that is the layer's input type.
fn encode_oracle(set: &PillarSet, g: &GridConfig, p: &ParamStore) -> Vec<Vec<f64>> {
    let w = p.get("vfe.weight").unwrap();
    let b = p.get("vfe.bias").unwrap().data();
    let c = b.len();
    set.pillars
        .iter()
        .map(|pil| {
            let n = pil.points.len() as f64;
            let mean: Vec<f64> = (0..3).map(|k| pil.points.iter().map(|q| q[k] as f64).sum::<f64>() / n).collect();
            let cx = g.x_range[0] as f64 + (pil.ix as f64 + 0.5) * g.pillar_size as f64;
            let cy = g.y_range[0] as f64 + (pil.iy as f64 + 0.5) * g.pillar_size as f64;
            let mut best = vec![f64::NEG_INFINITY; c];
            for q in &pil.points {
                let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
                let f = [q[0], q[1], q[2], q[3], q[4], q[0] - mean[0], q[1] - mean[1], q[2] - mean[2], q[0] - cx, q[1] - cy]
                    .map(|v| v as f32 as f64);
                for (ch, slot) in best.iter_mut().enumerate() {
                    let mut acc = b[ch] as f64;
                    for (k, fk) in f.iter().enumerate() {
                        acc += fk * w.data()[k * c + ch] as f64;
                    }
                    *slot = slot.max(acc.max(0.0));
                }
            }
            best
        })
        .collect()
}

#[test]
fn encoding_matches_loop_oracle() {
    let g = GridConfig::desk();
    let set = pillarize(&scene_cloud(2), &g).unwrap();
    let p = vfe_params(16, 4);
    let feats = encode_pillars(&set, &g, &p, "vfe").unwrap();
    assert_eq!(feats.features.shape(), [set.len(), 16]);
    let oracle = encode_oracle(&set, &g, &p);
    let mut worst = 0f64;
    for (row, want) in feats.features.data().chunks(16).zip(&oracle) {
        for (&got, &w) in row.iter().zip(want) {
            worst = worst.max((got as f64 - w).abs());
        }
    }
    let peak = oracle.iter().flatten().fold(0f64, |m, v| m.max(*v));
    assert!(worst <= 1e-6, "max |diff| {worst} at peak {peak}");
}

#[test]
fn single_point_pillar_is_its_embedding() {
    let g = GridConfig::square(3.2, 0.4);
    let set = pillarize(&cloud(vec![[1.1, -0.7, 0.4, 0.3, -0.05]]), &g).unwrap();
    let p = vfe_params(8, 9);
    let feats = encode_pillars(&set, &g, &p, "vfe").unwrap();
    let want = &encode_oracle(&set, &g, &p)[0];
    for (got, w) in feats.features.data().iter().zip(want) {
        assert!((*got as f64 - w).abs() <= 1e-6);
    }
}

#[test]
fn point_order_does_not_matter() {
    let g = GridConfig {
        max_points_per_pillar: 4,
        ..GridConfig::desk()
    };
    let p = vfe_params(8, 2);
    let c = scene_cloud(5);
    let mut shuffled = c.points.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(13));
    let bev = |pts: Vec<[f32; 5]>| {
        let set = pillarize(&cloud(pts), &g).unwrap();
        scatter_to_bev(&encode_pillars(&set, &g, &p, "vfe").unwrap(), &g).unwrap()
    };
    let (a, b) = (bev(c.points.clone()), bev(shuffled));
    assert_eq!(a.data.data(), b.data.data());
}

#[test]
fn scatter_of_no_pillars_is_zero() {
    let g = GridConfig::square(3.2, 0.4);
    let set = pillarize(&cloud(vec![]), &g).unwrap();
    assert!(set.is_empty());
    let p = vfe_params(4, 0);
    let map = scatter_to_bev(&encode_pillars(&set, &g, &p, "vfe").unwrap(), &g).unwrap();
    assert_eq!(map.data.shape(), [4, 16, 16]);
    assert!(map.data.data().iter().all(|&v| v == 0.0));
    assert_eq!(map.nonzero_cells(), 0);
}

#[test]
fn scatter_preserves_occupancy_and_values() {
    let g = GridConfig::square(3.2, 0.4);
    let pts = vec![
        [0.1, 0.1, 0.0, 0.5, 0.0],
        [-2.0, 1.0, 0.5, 0.5, 0.0],
        [2.9, -3.1, 1.0, 0.5, 0.0],
    ];
    let set = pillarize(&cloud(pts), &g).unwrap();
    let mut p = vfe_params(6, 1);
    // positive biases keep every ReLU output, hence every pillar row, nonzero
    p.set("vfe.bias", Tensor::full(&[6], 5.0)).unwrap();
    let feats = encode_pillars(&set, &g, &p, "vfe").unwrap();
    let map = scatter_to_bev(&feats, &g).unwrap();
    assert_eq!(map.nonzero_cells(), 3);
    let plane = 16 * 16;
    for (row, &cell) in feats.features.data().chunks(6).zip(&feats.cells) {
        for (ch, &v) in row.iter().enumerate() {
            assert_eq!(map.data.data()[ch * plane + cell].to_bits(), v.to_bits());
        }
    }
}

#[test]
fn duplicate_cells_are_rejected() {
    let g = GridConfig::square(3.2, 0.4);
    let feats = PillarFeatures {
        features: Tensor::full(&[2, 3], 1.0),
        cells: vec![7, 7],
        width: 16,
        height: 16,
    };
    assert!(matches!(scatter_to_bev(&feats, &g), Err(Error::Internal(_))));
}

#[test]
fn desk_scenes_are_sparse() {
    let g = GridConfig::desk();
    for seed in 0..5 {
        let set = pillarize(&scene_cloud(seed), &g).unwrap();
        let frac = set.len() as f64 / (g.width() * g.height()) as f64;
        assert!(frac < 0.15, "seed {seed}: {:.1}% occupied", 100.0 * frac);
    }
}
