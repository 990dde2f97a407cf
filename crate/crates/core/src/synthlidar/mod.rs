//! Synthetic scenes of moving boxes, LiDAR sweeps at 20 FPS, and ego-motion
//! compensated multi-sweep aggregation.
//!
//! Point density on an object falls off with the inverse square of its range
//! from the sensor. Occlusion is not modeled; only faces turned toward the
//! sensor receive points.

pub mod dataset;
pub mod geometry;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use geometry::{rect_corners, rects_overlap, wrap_angle, Pose2};

pub const SWEEP_RATE_HZ: f64 = 20.0;
pub const SWEEP_PERIOD_S: f64 = 1.0 / SWEEP_RATE_HZ;
pub const DEFAULT_SWEEPS: usize = 10;
/// Largest scene half-extent.
pub const MAX_EXTENT_M: f32 = 51.2;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["car", "pedestrian", "barrier"];

/// Label of points that do not belong to an object.
pub const GROUND_LABEL: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: u8,
    /// Box center, meters.
    pub center: [f32; 3],
    /// Length (along yaw), width, height, meters.
    pub size: [f32; 3],
    pub yaw: f32,
    /// Planar velocity, m/s.
    pub velocity: [f32; 2],
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_id as usize >= NUM_CLASSES {
            return Err(Error::Input(format!("class id {} out of range", self.class_id)));
        }
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Input(format!("box size {:?} must be positive", self.size)));
        }
        Ok(())
    }

    /// Constant-velocity position at time `t` (seconds, relative to now).
    pub fn at_time(&self, t: f64) -> ObjectSpec {
        let mut o = *self;
        o.center[0] = (self.center[0] as f64 + self.velocity[0] as f64 * t) as f32;
        o.center[1] = (self.center[1] as f64 + self.velocity[1] as f64 * t) as f32;
        o
    }

    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        rect_corners(
            [self.center[0] as f64, self.center[1] as f64],
            self.size[0] as f64,
            self.size[1] as f64,
            self.yaw as f64,
        )
    }

    pub fn speed(&self) -> f32 {
        self.velocity[0].hypot(self.velocity[1])
    }

    /// Re-expresses the box in the frame whose world pose is `frame`.
    pub fn in_frame(&self, frame: &Pose2) -> ObjectSpec {
        let inv = frame.inverse();
        let c = inv.apply([self.center[0] as f64, self.center[1] as f64]);
        let (s, co) = inv.yaw.sin_cos();
        let v = [self.velocity[0] as f64, self.velocity[1] as f64];
        ObjectSpec {
            class_id: self.class_id,
            center: [c[0] as f32, c[1] as f32, self.center[2]],
            size: self.size,
            yaw: wrap_angle(self.yaw as f64 + inv.yaw) as f32,
            velocity: [(co * v[0] - s * v[1]) as f32, (s * v[0] + co * v[1]) as f32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// Object states at t = 0, world frame.
    pub objects: Vec<ObjectSpec>,
    /// Ego moves at constant planar velocity from the origin at t = 0.
    pub ego_velocity: [f32; 2],
    pub extent: f32,
}

impl Scene {
    pub fn empty(seed: u64, extent: f32) -> Self {
        Self {
            seed,
            objects: Vec::new(),
            ego_velocity: [0.0, 0.0],
            extent,
        }
    }

    pub fn ego_pose(&self, t: f64) -> Pose2 {
        Pose2::new(
            self.ego_velocity[0] as f64 * t,
            self.ego_velocity[1] as f64 * t,
            0.0,
        )
    }

    pub fn objects_at(&self, t: f64) -> Vec<ObjectSpec> {
        self.objects.iter().map(|o| o.at_time(t)).collect()
    }

    /// Ground-truth boxes at t = 0 in the current ego frame.
    pub fn ground_truth(&self) -> Vec<ObjectSpec> {
        let pose = self.ego_pose(0.0);
        self.objects.iter().map(|o| o.in_frame(&pose)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub extent: f32,
    /// Objects keep their centers at least this far from the ego.
    pub min_range: f32,
    /// Extra clearance between boxes when placing them.
    pub clearance: f32,
    pub ego_speed: f32,
    /// Upper bound of the uniform speed draw, per class.
    pub max_speed: [f32; NUM_CLASSES],
    pub max_attempts_per_object: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 12.0,
            min_range: 3.0,
            clearance: 0.3,
            ego_speed: 5.0,
            max_speed: [10.0, 1.5, 0.0],
            max_attempts_per_object: 200,
        }
    }
}

/// Nominal box dimensions per class (l, w, h).
pub const CLASS_SIZES: [[f32; 3]; NUM_CLASSES] = [[4.5, 1.9, 1.6], [0.8, 0.7, 1.8], [2.5, 0.5, 1.0]];

pub fn generate_scene(seed: u64, n_objects: usize, extent: f32) -> Result<Scene> {
    generate_scene_with(
        seed,
        n_objects,
        &SceneConfig {
            extent,
            ..SceneConfig::default()
        },
    )
}

pub fn generate_scene_with(seed: u64, n_objects: usize, cfg: &SceneConfig) -> Result<Scene> {
    if !(cfg.extent > 0.0 && cfg.extent <= MAX_EXTENT_M) {
        return Err(Error::Config(format!(
            "scene extent {} outside (0, {MAX_EXTENT_M}]",
            cfg.extent
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n_objects);
    let mut footprints: Vec<[[f64; 2]; 4]> = Vec::with_capacity(n_objects);
    let budget = cfg.max_attempts_per_object * n_objects.max(1);
    let mut attempts = 0;
    while objects.len() < n_objects {
        if attempts >= budget {
            return Err(Error::Placement {
                requested: n_objects,
                placed: objects.len(),
            });
        }
        attempts += 1;
        let class_id = rng.gen_range(0..NUM_CLASSES as u8);
        let base = CLASS_SIZES[class_id as usize];
        let jitter = |rng: &mut ChaCha8Rng, v: f32| v * rng.gen_range(0.9f32..1.1);
        let size = [
            jitter(&mut rng, base[0]),
            jitter(&mut rng, base[1]),
            jitter(&mut rng, base[2]),
        ];
        let margin = size[0].max(size[1]) / 2.0;
        let lim = (cfg.extent - margin).max(0.0);
        let x = rng.gen_range(-lim..=lim);
        let y = rng.gen_range(-lim..=lim);
        if x.hypot(y) < cfg.min_range {
            continue;
        }
        let yaw = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
        let vmax = cfg.max_speed[class_id as usize];
        let speed = if vmax > 0.0 {
            rng.gen_range(0.0..=vmax)
        } else {
            0.0
        };
        let obj = ObjectSpec {
            class_id,
            center: [x, y, size[2] / 2.0],
            size,
            yaw,
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
        };
        let padded = rect_corners(
            [x as f64, y as f64],
            (size[0] + cfg.clearance) as f64,
            (size[1] + cfg.clearance) as f64,
            yaw as f64,
        );
        if footprints.iter().any(|f| rects_overlap(f, &padded)) {
            continue;
        }
        footprints.push(padded);
        objects.push(obj);
    }
    Ok(Scene {
        seed,
        objects,
        ego_velocity: [cfg.ego_speed, 0.0],
        extent: cfg.extent,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Object points at 1 m range; counts fall off as `density / range²`.
    pub density: f32,
    pub min_points: usize,
    pub max_points: usize,
    /// Ground clutter per sweep. Kept sparse so a desk-scale BEV grid stays
    /// mostly empty (about 10% occupied with five objects over ten sweeps).
    pub ground_points: usize,
    /// Ground points are drawn uniformly over a disc of this radius.
    pub ground_radius: f32,
    pub sensor_height: f32,
    pub intensity: f32,
    pub intensity_noise: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            density: 20_000.0,
            min_points: 4,
            max_points: 2_000,
            ground_points: 100,
            ground_radius: 12.0,
            sensor_height: 1.8,
            intensity: 0.5,
            intensity_noise: 0.1,
        }
    }
}

impl RenderConfig {
    /// Object point count before clamping.
    pub fn unclamped_point_count(&self, range: f32) -> f64 {
        let r = range.max(0.5) as f64;
        self.density as f64 / (r * r)
    }

    pub fn point_count(&self, range: f32) -> usize {
        (self.unclamped_point_count(range).round() as usize).clamp(self.min_points, self.max_points)
    }
}

/// One LiDAR frame. Points are `(x, y, z, intensity)` in the sweep's own
/// ego frame; `labels[i]` is the source object index or [`GROUND_LABEL`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub points: Vec<[f32; 4]>,
    pub labels: Vec<i32>,
    pub ego_pose: Pose2,
    pub timestamp: f64,
}

struct Face {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    normal: [f64; 3],
}

impl Face {
    fn area(&self) -> f64 {
        let n = |a: [f64; 3]| (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        n(self.u) * n(self.v)
    }

    fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.origin[i] + 0.5 * (self.u[i] + self.v[i]))
    }
}

/// The four sides and the top of a box, world frame.
fn box_faces(o: &ObjectSpec) -> Vec<Face> {
    let (s, c) = (o.yaw as f64).sin_cos();
    let ax = [c, s, 0.0];
    let ay = [-s, c, 0.0];
    let [l, w, h] = o.size.map(|v| v as f64);
    let ctr = o.center.map(|v| v as f64);
    let point = |a: f64, b: f64, z: f64| -> [f64; 3] {
        [
            ctr[0] + a * ax[0] + b * ay[0],
            ctr[1] + a * ax[1] + b * ay[1],
            ctr[2] + z,
        ]
    };
    let scale = |v: [f64; 3], k: f64| v.map(|x| x * k);
    let up = [0.0, 0.0, h];
    vec![
        Face {
            origin: point(l / 2.0, -w / 2.0, -h / 2.0),
            u: scale(ay, w),
            v: up,
            normal: ax,
        },
        Face {
            origin: point(-l / 2.0, -w / 2.0, -h / 2.0),
            u: scale(ay, w),
            v: up,
            normal: scale(ax, -1.0),
        },
        Face {
            origin: point(-l / 2.0, w / 2.0, -h / 2.0),
            u: scale(ax, l),
            v: up,
            normal: ay,
        },
        Face {
            origin: point(-l / 2.0, -w / 2.0, -h / 2.0),
            u: scale(ax, l),
            v: up,
            normal: scale(ay, -1.0),
        },
        Face {
            origin: point(-l / 2.0, -w / 2.0, h / 2.0),
            u: scale(ax, l),
            v: scale(ay, w),
            normal: [0.0, 0.0, 1.0],
        },
    ]
}

pub fn render_sweep(scene: &Scene, time: f64, seed: u64) -> Sweep {
    render_sweep_with(scene, time, seed, &RenderConfig::default())
}

pub fn render_sweep_with(scene: &Scene, time: f64, seed: u64, cfg: &RenderConfig) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = scene.ego_pose(time);
    let to_ego = pose.inverse();
    let sensor = [pose.x, pose.y, cfg.sensor_height as f64];
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let intensity = |rng: &mut ChaCha8Rng, base: f32| {
        (base + rng.gen_range(-cfg.intensity_noise..=cfg.intensity_noise)).clamp(0.0, 1.0)
    };

    for (idx, obj) in scene.objects.iter().enumerate() {
        let o = obj.at_time(time);
        let range = ((o.center[0] as f64 - sensor[0]).hypot(o.center[1] as f64 - sensor[1])) as f32;
        let n = cfg.point_count(range);
        let visible: Vec<Face> = box_faces(&o)
            .into_iter()
            .filter(|f| {
                let c = f.center();
                let to_sensor: [f64; 3] = std::array::from_fn(|i| sensor[i] - c[i]);
                (0..3).map(|i| f.normal[i] * to_sensor[i]).sum::<f64>() > 0.0
            })
            .collect();
        if visible.is_empty() {
            continue;
        }
        let areas: Vec<f64> = visible.iter().map(Face::area).collect();
        let total: f64 = areas.iter().sum();
        for _ in 0..n {
            let mut pick = rng.gen_range(0.0..total);
            let mut fi = 0;
            while fi + 1 < visible.len() && pick >= areas[fi] {
                pick -= areas[fi];
                fi += 1;
            }
            let f = &visible[fi];
            let (a, b): (f64, f64) = (rng.gen(), rng.gen());
            let p: [f64; 3] = std::array::from_fn(|i| f.origin[i] + a * f.u[i] + b * f.v[i]);
            let e = to_ego.apply([p[0], p[1]]);
            points.push([e[0] as f32, e[1] as f32, p[2] as f32, intensity(&mut rng, cfg.intensity)]);
            labels.push(idx as i32);
        }
    }

    for _ in 0..cfg.ground_points {
        let r = cfg.ground_radius as f64 * rng.gen::<f64>().sqrt();
        let th = rng.gen_range(0.0..std::f64::consts::TAU);
        points.push([
            (r * th.cos()) as f32,
            (r * th.sin()) as f32,
            0.0,
            intensity(&mut rng, 0.2),
        ]);
        labels.push(GROUND_LABEL);
    }

    Sweep {
        points,
        labels,
        ego_pose: pose,
        timestamp: time,
    }
}

fn sweep_seed(scene_seed: u64, index: usize) -> u64 {
    scene_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1)
}

/// Sweeps at `0, -0.05, ..., -(n-1)*0.05` seconds, current sweep first.
pub fn simulate_sequence(scene: &Scene, n_sweeps: usize) -> Result<Vec<Sweep>> {
    simulate_sequence_with(scene, n_sweeps, &RenderConfig::default())
}

pub fn simulate_sequence_with(scene: &Scene, n_sweeps: usize, cfg: &RenderConfig) -> Result<Vec<Sweep>> {
    if n_sweeps == 0 {
        return Err(Error::Input("a sequence needs at least one sweep".into()));
    }
    Ok((0..n_sweeps)
        .map(|i| {
            let t = -(i as f64) / SWEEP_RATE_HZ;
            render_sweep_with(scene, t, sweep_seed(scene.seed, i), cfg)
        })
        .collect())
}

/// Points `(x, y, z, intensity, Δt)` in the current ego frame, `Δt ≤ 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregatedCloud {
    pub points: Vec<[f32; 5]>,
    /// Source labels when known (empty for clouds loaded from disk).
    pub labels: Vec<i32>,
}

impl AggregatedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// BEV extent (max − min of the projection onto unit `dir`) of the
    /// points labeled `label`, or `None` when there are none.
    pub fn extent_along(&self, label: i32, dir: [f64; 2]) -> Option<f64> {
        let norm = dir[0].hypot(dir[1]);
        let (lo, hi) = self
            .points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(p, _)| (p[0] as f64 * dir[0] + p[1] as f64 * dir[1]) / norm)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        (lo <= hi).then_some(hi - lo)
    }
}

/// Transforms every sweep into the frame of `sweeps[0]` (the current sweep)
/// and appends the relative timestamp as a fifth channel.
pub fn aggregate_sweeps(sweeps: &[Sweep]) -> Result<AggregatedCloud> {
    let current = sweeps
        .first()
        .ok_or_else(|| Error::Input("cannot aggregate an empty sweep list".into()))?;
    let to_current = current.ego_pose.inverse();
    let mut out = AggregatedCloud::default();
    for sweep in sweeps {
        let tf = to_current.compose(&sweep.ego_pose);
        let dt = (sweep.timestamp - current.timestamp) as f32;
        let identity = sweep.timestamp == current.timestamp && tf == Pose2::IDENTITY;
        for (p, &label) in sweep.points.iter().zip(&sweep.labels) {
            let [x, y] = if identity {
                [p[0], p[1]]
            } else {
                let q = tf.apply([p[0] as f64, p[1] as f64]);
                [q[0] as f32, q[1] as f32]
            };
            out.points.push([x, y, p[2], p[3], dt]);
            out.labels.push(label);
        }
    }
    Ok(out)
}
