//! End-to-end loss, momentum SGD, and joint point/box augmentation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{assign_targets, decode_detections, head_on, DenseHead, DetectionBox};
use super::loss::{loss_on, LossBreakdown};
use super::{backbone_on, ModelConfig};
use crate::error::{Error, Result};
use crate::pillars::bev_on;
use crate::synthlidar::dataset::SceneData;
use crate::synthlidar::{wrap_angle, AggregatedCloud, ObjectSpec};
use crate::tensor::{ParamStore, Tape, Var};

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// All sweeps (dynamic branch).
    pub dynamic: AggregatedCloud,
    /// Current sweep (static branch).
    pub static_cloud: AggregatedCloud,
    pub boxes: Vec<ObjectSpec>,
}

impl Sample {
    pub fn from_scene(data: &SceneData) -> Self {
        Self {
            dynamic: data.dynamic_cloud().clone(),
            static_cloud: data.static_cloud(),
            boxes: data.boxes.clone(),
        }
    }
}

/// Dynamic and (unless `dynamic_only`) static BEV maps on the tape.
pub fn bev_inputs_on(
    tape: &mut Tape,
    sample: &Sample,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<(Var, Option<Var>)> {
    let d = bev_on(tape, &sample.dynamic, &cfg.grid, params, "vfe.dyn")?;
    let s = if cfg.fusion_variant.has_static_path() {
        Some(bev_on(tape, &sample.static_cloud, &cfg.grid, params, "vfe.sta")?)
    } else {
        None
    };
    Ok((d, s))
}

/// Clouds to loss: VFE, backbone, head, loss. Returns (total, parts).
pub fn sample_loss_on(tape: &mut Tape, sample: &Sample, params: &ParamStore, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let (d, s) = bev_inputs_on(tape, sample, params, cfg)?;
    let bb = backbone_on(tape, d, s, params, cfg)?;
    let head = head_on(tape, bb.head_in, params)?;
    let boxes: Vec<DetectionBox> = sample.boxes.iter().map(DetectionBox::from_object).collect();
    let targets = assign_targets(&boxes, &cfg.head_grid());
    loss_on(tape, head, &targets, cfg.classes)
}

/// Dense head output and decoded boxes for one sample.
pub fn predict(
    sample: &Sample,
    params: &ParamStore,
    cfg: &ModelConfig,
    score_threshold: f32,
) -> Result<(DenseHead, Vec<DetectionBox>)> {
    let mut tape = Tape::new();
    let (d, s) = bev_inputs_on(&mut tape, sample, params, cfg)?;
    let bb = backbone_on(&mut tape, d, s, params, cfg)?;
    let head = head_on(&mut tape, bb.head_in, params)?;
    let dense = DenseHead::new(tape.value(head).clone(), cfg.classes)?;
    let boxes = decode_detections(&dense, &cfg.head_grid(), score_threshold);
    Ok((dense, boxes))
}

/// `v ← μ v + g`, `θ ← θ − lr v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    pub velocity: BTreeMap<String, Vec<f32>>,
}

impl Default for SgdMomentum {
    fn default() -> Self {
        Self::new(1e-3, 0.9)
    }
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, g) in grads {
            let t = params.get_mut(name)?;
            if g.len() != t.numel() {
                return Err(Error::Internal(format!("gradient of `{name}` has the wrong size")));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((vi, &gi), w) in v.iter_mut().zip(g).zip(t.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step: usize,
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
    pub total: f64,
}

impl TrainLog {
    pub fn new(step: usize, l: &LossBreakdown) -> Self {
        Self {
            step,
            loc: l.loc,
            cls: l.cls,
            dir: l.dir,
            total: l.total,
        }
    }
}

fn sample_grads(sample: &Sample, params: &ParamStore, cfg: &ModelConfig) -> Result<(LossBreakdown, BTreeMap<String, Vec<f32>>)> {
    let mut tape = Tape::new();
    let (total, parts) = sample_loss_on(&mut tape, sample, params, cfg)?;
    let p = tape.value(parts).data();
    let loss = LossBreakdown::new(p[0] as f64, p[1] as f64, p[2] as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss loc={} cls={} dir={} on a sample with {} boxes and {} points",
            loss.loc,
            loss.cls,
            loss.dir,
            sample.boxes.len(),
            sample.dynamic.len()
        )));
    }
    let grads = tape.backward(total)?.param_grads(&tape);
    Ok((loss, grads))
}

/// Mean loss over `batch`, backward through every stage, one optimizer
/// update. Samples run in parallel; gradients are reduced in batch order.
pub fn train_step(
    params: &mut ParamStore,
    batch: &[Sample],
    opt: &mut SgdMomentum,
    cfg: &ModelConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let results: Vec<_> = batch
        .par_iter()
        .map(|s| sample_grads(s, params, cfg))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut sum = [0.0f64; 3];
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (loss, g) in &results {
        sum[0] += loss.loc;
        sum[1] += loss.cls;
        sum[2] += loss.dir;
        for (name, values) in g {
            let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; values.len()]);
            for (a, &v) in acc.iter_mut().zip(values) {
                *a += v as f64;
            }
        }
    }
    let mean: BTreeMap<String, Vec<f32>> = grads
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|x| (x / n) as f32).collect()))
        .collect();
    if let Some((name, _)) = mean.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    opt.apply(params, &mean)?;
    Ok(LossBreakdown::new(sum[0] / n, sum[1] / n, sum[2] / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 1,
            lr: 1e-3,
            momentum: 0.9,
            augment: false,
            seed: 0,
        }
    }
}

/// `opts.steps` updates. Step `s` takes samples `s·b .. s·b + b` (cyclic) of
/// one seeded permutation of `samples`; augmentation draws from a single
/// seeded stream, so a run is a function of its inputs.
pub fn train(
    params: &mut ParamStore,
    samples: &[Sample],
    cfg: &ModelConfig,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&TrainLog) -> Result<()>,
) -> Result<Vec<TrainLog>> {
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut opt = SgdMomentum::new(opts.lr, opts.momentum);
    let mut logs = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<Sample> = (0..opts.batch_size)
            .map(|i| {
                let s = &samples[order[(step * opts.batch_size + i) % samples.len()]];
                if opts.augment {
                    augment(s, &mut rng)
                } else {
                    s.clone()
                }
            })
            .collect();
        let loss = train_step(params, &batch, &mut opt, cfg)?;
        let log = TrainLog::new(step, &loss);
        on_step(&log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Random flips across the x and y axes and a z-rotation in [−π/8, π/8],
/// applied to points and boxes jointly.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    let flip_x = rng.gen_bool(0.5);
    let flip_y = rng.gen_bool(0.5);
    let theta = rng.gen_range(-std::f64::consts::FRAC_PI_8..=std::f64::consts::FRAC_PI_8);
    let (s, c) = theta.sin_cos();
    let map_xy = |x: f64, y: f64| {
        let y = if flip_x { -y } else { y };
        let x = if flip_y { -x } else { x };
        (c * x - s * y, s * x + c * y)
    };
    let map_yaw = |yaw: f64| {
        let yaw = if flip_x { -yaw } else { yaw };
        let yaw = if flip_y { std::f64::consts::PI - yaw } else { yaw };
        wrap_angle(yaw + theta)
    };
    let map_cloud = |cloud: &AggregatedCloud| AggregatedCloud {
        points: cloud
            .points
            .iter()
            .map(|p| {
                let (x, y) = map_xy(p[0] as f64, p[1] as f64);
                [x as f32, y as f32, p[2], p[3], p[4]]
            })
            .collect(),
        labels: cloud.labels.clone(),
    };
    let boxes = sample
        .boxes
        .iter()
        .map(|b| {
            let (x, y) = map_xy(b.center[0] as f64, b.center[1] as f64);
            let (vx, vy) = map_xy(b.velocity[0] as f64, b.velocity[1] as f64);
            ObjectSpec {
                center: [x as f32, y as f32, b.center[2]],
                yaw: map_yaw(b.yaw as f64) as f32,
                velocity: [vx as f32, vy as f32],
                ..*b
            }
        })
        .collect();
    Sample {
        dynamic: map_cloud(&sample.dynamic),
        static_cloud: map_cloud(&sample.static_cloud),
        boxes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augmentation_moves_points_and_boxes_together() {
        let b = ObjectSpec {
            class_id: 0,
            center: [3.0, 1.0, 0.8],
            size: [4.0, 2.0, 1.5],
            yaw: 0.4,
            velocity: [2.0, 0.5],
        };
        // a point on the box's forward axis, 1 m ahead of the center
        let ahead = [3.0 + 0.4f32.cos(), 1.0 + 0.4f32.sin(), 0.5, 0.5, 0.0];
        let cloud = AggregatedCloud {
            points: vec![ahead],
            labels: vec![],
        };
        let s = Sample {
            dynamic: cloud.clone(),
            static_cloud: cloud,
            boxes: vec![b],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..16 {
            let a = augment(&s, &mut rng);
            let nb = a.boxes[0];
            let p = a.dynamic.points[0];
            // the point stays 1 m along the (transformed) heading; flips
            // reverse the heading only when exactly one axis is flipped
            let dx = p[0] - nb.center[0];
            let dy = p[1] - nb.center[1];
            assert!((dx.hypot(dy) - 1.0).abs() < 1e-5);
            let cross = dx * nb.yaw.sin() - dy * nb.yaw.cos();
            assert!(cross.abs() < 1e-5, "point left the heading axis");
        }
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = ParamStore::new(0);
        p.insert("w", crate::tensor::Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut opt = SgdMomentum::new(0.1, 0.9);
        let g: BTreeMap<String, Vec<f32>> = [("w".to_string(), vec![1.0])].into();
        opt.apply(&mut p, &g).unwrap();
        opt.apply(&mut p, &g).unwrap();
        // v1 = 1, v2 = 1.9; w = 1 − 0.1 − 0.19
        assert!((p.get("w").unwrap().data()[0] - 0.71).abs() < 1e-6);
    }
}
