use std::collections::BTreeSet;

use dynstaf::synthlidar::*;

/// Sutherland–Hodgman clip of `subject` by convex counter-clockwise `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let inside = |p: [f64; 2], a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
    let cross = |p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let t = (ex * (p[1] - a[1]) - ey * (p[0] - a[0])) / (ey * dx - ex * dy);
        [p[0] + t * dx, p[1] + t * dy]
    };
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            match (inside(p, a, b), inside(q, a, b)) {
                (true, true) => out.push(q),
                (true, false) => out.push(cross(p, q, a, b)),
                (false, true) => {
                    out.push(cross(p, q, a, b));
                    out.push(q);
                }
                (false, false) => {}
            }
        }
        if out.is_empty() {
            break;
        }
    }
    out
}

fn area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| poly[i][0] * poly[(i + 1) % n][1] - poly[(i + 1) % n][0] * poly[i][1])
        .sum::<f64>()
        .abs()
        / 2.0
}

fn iou(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    let inter = area(&clip_polygon(a, b));
    inter / (area(a) + area(b) - inter)
}

#[test]
fn clipping_oracle_is_sane() {
    let a = geometry::rect_corners([0.0, 0.0], 2.0, 2.0, 0.0);
    let b = geometry::rect_corners([1.0, 0.0], 2.0, 2.0, 0.0);
    assert!((iou(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
    assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    let far = geometry::rect_corners([5.0, 0.0], 2.0, 2.0, 0.3);
    assert_eq!(iou(&a, &far), 0.0);
}

#[test]
fn generated_boxes_never_overlap() {
    for seed in [1, 2, 3, 7, 11] {
        let scene = generate_scene(seed, 5, 12.0).unwrap();
        assert_eq!(scene.objects.len(), 5);
        for (i, a) in scene.objects.iter().enumerate() {
            for b in &scene.objects[i + 1..] {
                let v = iou(&a.bev_corners(), &b.bev_corners());
                assert_eq!(v, 0.0, "seed {seed}: boxes overlap with IoU {v}");
            }
        }
    }
}

fn single_object_scene(center: [f32; 2], velocity: [f32; 2], ego_speed: f32) -> Scene {
    Scene {
        seed: 0,
        objects: vec![ObjectSpec {
            class_id: 0,
            center: [center[0], center[1], 0.8],
            size: CLASS_SIZES[0],
            yaw: velocity[1].atan2(velocity[0]),
            velocity,
        }],
        ego_velocity: [ego_speed, 0.0],
        extent: MAX_EXTENT_M,
    }
}

#[test]
fn rendered_point_counts_follow_inverse_square() {
    let cfg = RenderConfig {
        density: 64_000.0,
        max_points: 1_000_000,
        ground_points: 0,
        ..RenderConfig::default()
    };
    let count = |range: f32| {
        let scene = single_object_scene([range, 0.0], [0.0, 0.0], 0.0);
        render_sweep_with(&scene, 0.0, 1, &cfg).points.len()
    };
    // ranges are measured from the sensor, which sits above the origin
    assert_eq!(count(5.0), 2560);
    assert_eq!(count(40.0), 40);
}

#[test]
fn object_points_lie_on_the_box_surface() {
    let scene = generate_scene(6, 5, 12.0).unwrap();
    let sweep = render_sweep(&scene, 0.0, 3);
    let mut checked = 0;
    for (p, &label) in sweep.points.iter().zip(&sweep.labels) {
        if label == GROUND_LABEL {
            continue;
        }
        let o = &scene.objects[label as usize];
        let (s, c) = (o.yaw as f64).sin_cos();
        let (dx, dy) = (p[0] as f64 - o.center[0] as f64, p[1] as f64 - o.center[1] as f64);
        let local = [c * dx + s * dy, -s * dx + c * dy, p[2] as f64 - o.center[2] as f64];
        let half = o.size.map(|v| v as f64 / 2.0);
        // inside the box (with slack) and on one of its faces
        assert!((0..3).all(|i| local[i].abs() <= half[i] + 0.01), "{local:?} outside {half:?}");
        let gap = (0..3).map(|i| half[i] - local[i].abs()).fold(f64::INFINITY, f64::min);
        assert!(gap <= 0.01, "point {local:?} is {gap} m inside the box");
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn ten_sweeps_cover_the_previous_half_second() {
    let scene = generate_scene(0, 3, 12.0).unwrap();
    let sweeps = simulate_sequence(&scene, DEFAULT_SWEEPS).unwrap();
    let first = sweeps.first().unwrap().timestamp;
    let last = sweeps.last().unwrap().timestamp;
    assert_eq!(first, 0.0);
    assert!((first - last - 0.45).abs() < 1e-12);

    let cloud = aggregate_sweeps(&sweeps).unwrap();
    let seen: BTreeSet<u32> = cloud.points.iter().map(|p| p[4].to_bits()).collect();
    let expected: BTreeSet<u32> = (0..10).map(|i| (0.0 - i as f64 / 20.0) as f32).map(f32::to_bits).collect();
    assert_eq!(seen, expected);
    let n0 = sweeps[0].points.len();
    assert!(cloud.points[..n0].iter().all(|p| p[4] == 0.0));
}

#[test]
fn single_sweep_sequence_is_at_time_zero() {
    let scene = generate_scene(0, 2, 12.0).unwrap();
    let sweeps = simulate_sequence(&scene, 1).unwrap();
    assert_eq!(sweeps.len(), 1);
    assert_eq!(sweeps[0].timestamp, 0.0);
}

#[test]
fn rotated_ego_motion_is_compensated() {
    // previous ego at the origin facing +y; current ego at (1, 0) facing +x
    let prev = Sweep {
        points: vec![[2.0, 0.0, 0.3, 0.5]],
        labels: vec![GROUND_LABEL],
        ego_pose: geometry::Pose2::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
        timestamp: -0.05,
    };
    let cur = Sweep {
        points: vec![],
        labels: vec![],
        ego_pose: geometry::Pose2::new(1.0, 0.0, 0.0),
        timestamp: 0.0,
    };
    // the point is at world (0, 2), i.e. (-1, 2) from the current ego
    let p = aggregate_sweeps(&[cur, prev]).unwrap().points[0];
    assert!((p[0] + 1.0).abs() < 1e-6 && (p[1] - 2.0).abs() < 1e-6, "{p:?}");
    assert_eq!(p[2], 0.3);
}

/// Aggregated minus single-sweep extent along the motion direction of an
/// object driving past the ego at `speed`.
fn blur(speed: f32) -> f64 {
    let scene = single_object_scene([2.0, 8.0], [speed, 0.0], 5.0);
    let sweeps = simulate_sequence(&scene, DEFAULT_SWEEPS).unwrap();
    let all = aggregate_sweeps(&sweeps).unwrap();
    let current = aggregate_sweeps(&sweeps[..1]).unwrap();
    all.extent_along(0, [1.0, 0.0]).unwrap() - current.extent_along(0, [1.0, 0.0]).unwrap()
}

#[test]
fn fast_object_is_smeared_over_its_displacement() {
    let e = blur(10.0);
    assert!((e - 4.5).abs() <= 0.3, "elongation {e}");
}

/// Extent of a box footprint projected onto unit `dir`.
fn footprint_extent(o: &ObjectSpec, dir: [f64; 2]) -> f64 {
    let d: Vec<f64> = o.bev_corners().iter().map(|c| c[0] * dir[0] + c[1] * dir[1]).collect();
    d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min)
}

#[test]
fn stationary_object_stays_sharp_under_ego_motion() {
    let e = blur(0.0);
    assert!(e.abs() <= 0.1, "excess spread {e}");
}

#[test]
fn compensated_stationary_points_stay_inside_their_footprint() {
    // max − min over one sweep has a sampling tail, so the sharp check is
    // against the true footprint, over many scenes and render seeds
    let still = SceneConfig {
        max_speed: [0.0; NUM_CLASSES],
        ..SceneConfig::default()
    };
    for seed in 0..20 {
        let scene = generate_scene_with(seed, 4, &still).unwrap();
        let sweeps = simulate_sequence(&scene, DEFAULT_SWEEPS).unwrap();
        let all = aggregate_sweeps(&sweeps).unwrap();
        let gt = scene.ground_truth();
        for (label, o) in gt.iter().enumerate() {
            for dir in [[1.0, 0.0], [0.0, 1.0]] {
                let spread = all.extent_along(label as i32, dir).unwrap();
                let excess = spread - footprint_extent(o, dir);
                assert!(excess <= 1e-3, "seed {seed} object {label}: {excess} m beyond its footprint");
            }
        }
    }
}

#[test]
fn blur_grows_with_speed() {
    let e: Vec<f64> = [0.0, 2.0, 5.0, 10.0, 15.0].map(blur).to_vec();
    assert!(e.windows(2).all(|w| w[0] < w[1]), "{e:?}");
}
