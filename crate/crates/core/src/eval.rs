//! Center-distance detection evaluation.
//!
//! A prediction matches a ground-truth box of the same class when their
//! planar (x, y) center distance is within the threshold. Matching is greedy
//! in descending score order, one-to-one. Per class and threshold the
//! predictions of all frames are pooled and ranked by score to trace a
//! precision/recall curve; AP is its all-points interpolated area. Equal
//! scores are ranked as one group, so the result does not depend on frame
//! order or on ties inside the pool.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, predict, Checkpoint, DetectionBox, Sample};
use crate::synthlidar::dataset::{list_scenes, read_scene};
use crate::synthlidar::CLASS_NAMES;

/// Matching thresholds, meters.
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Threshold whose matches define the translation error.
pub const ATE_THRESHOLD: f64 = 2.0;

/// Marker file that turns a checkpoint directory into a ground-truth echo.
pub const GT_ECHO_FILE: &str = "gt_echo";

/// Detections below this class probability are not decoded.
pub const DEFAULT_SCORE_THRESHOLD: f32 = 0.05;

pub fn center_distance(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let dx = a.center[0] as f64 - b.center[0] as f64;
    let dy = a.center[1] as f64 - b.center[1] as f64;
    dx.hypot(dy)
}

/// One frame's greedy assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Per prediction (input order): matched ground-truth index and distance.
    pub pred_to_gt: Vec<Option<(usize, f64)>>,
    /// Per ground-truth box: whether some prediction claimed it.
    pub gt_matched: Vec<bool>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.pred_to_gt.iter().filter(|m| m.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.pred_to_gt.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| !m).count()
    }
}

/// Predictions are visited by descending score (ties: input order); each
/// claims the nearest unclaimed same-class ground truth within `threshold`
/// (ties: lower index).
pub fn match_detections(preds: &[DetectionBox], gts: &[DetectionBox], threshold: f64) -> Matching {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut pred_to_gt = vec![None; preds.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in order {
        let p = &preds[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !gt_matched[*j] && g.class_id == p.class_id)
            .map(|(j, g)| (j, center_distance(p, g)))
            .filter(|&(_, d)| d <= threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((j, d)) = best {
            gt_matched[j] = true;
            pred_to_gt[i] = Some((j, d));
        }
    }
    Matching { pred_to_gt, gt_matched }
}

/// All-points interpolated AP from `(score, is_true_positive)` pairs and the
/// number of ground-truth boxes. Precision/recall is sampled after each group
/// of equal scores. Returns 0 when `n_gt` is 0.
pub fn average_precision(hits: &[(f32, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked = hits.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    // (recall, precision) at the end of each score group
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (i, &(score, hit)) in ranked.iter().enumerate() {
        seen += 1;
        tp += hit as usize;
        if ranked.get(i + 1).is_none_or(|next| next.0 != score) {
            curve.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
        }
    }
    // precision envelope: max precision at any recall ≥ r
    let mut best = 0.0f64;
    for point in curve.iter_mut().rev() {
        best = best.max(point.1);
        point.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in curve {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// One frame: predictions and ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub preds: Vec<DetectionBox>,
    pub gts: Vec<DetectionBox>,
}

/// One class at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholdRow {
    pub class: String,
    pub threshold: f64,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Classes with ground truth only: `(threshold, AP)` in threshold order.
    pub per_class_ap: BTreeMap<String, Vec<(f64, f64)>>,
    /// Mean over `per_class_ap` entries; 0 when no class has ground truth.
    pub map_mean: f64,
    /// Mean center distance of matches at [`ATE_THRESHOLD`]; `None` without
    /// matches.
    pub ate: Option<f64>,
    /// Every class × threshold, class-major.
    pub counts: Vec<ClassThresholdRow>,
    pub frames: usize,
}

pub fn class_name(id: u8) -> String {
    CLASS_NAMES
        .get(id as usize)
        .map_or_else(|| format!("class{id}"), |s| s.to_string())
}

/// Evaluates `frames` over class ids `0..classes`.
pub fn evaluate_frames(frames: &[Frame], classes: usize) -> EvalReport {
    let matchings: Vec<Vec<Matching>> = DISTANCE_THRESHOLDS
        .iter()
        .map(|&t| frames.iter().map(|f| match_detections(&f.preds, &f.gts, t)).collect())
        .collect();
    let ate_at = DISTANCE_THRESHOLDS.iter().position(|&t| t == ATE_THRESHOLD).expect("ATE threshold is evaluated");
    let mut matched: Vec<f64> = matchings[ate_at]
        .iter()
        .flat_map(|m| m.pred_to_gt.iter().flatten().map(|&(_, d)| d))
        .collect();
    // summed in sorted order so frame order cannot change the rounding
    matched.sort_by(f64::total_cmp);
    let mut counts = Vec::new();
    let mut per_class_ap = BTreeMap::new();
    for id in (0..classes).map(|c| c as u8) {
        for (&threshold, per_frame) in DISTANCE_THRESHOLDS.iter().zip(&matchings) {
            let mut hits = Vec::new();
            let (mut n_gt, mut fn_) = (0, 0);
            for (f, m) in frames.iter().zip(per_frame) {
                for (p, hit) in f.preds.iter().zip(&m.pred_to_gt) {
                    if p.class_id == id {
                        hits.push((p.score, hit.is_some()));
                    }
                }
                for (g, &found) in f.gts.iter().zip(&m.gt_matched) {
                    if g.class_id == id {
                        n_gt += 1;
                        fn_ += !found as usize;
                    }
                }
            }
            let tp = hits.iter().filter(|h| h.1).count();
            let ap = (n_gt > 0).then(|| average_precision(&hits, n_gt));
            if let Some(ap) = ap {
                per_class_ap
                    .entry(class_name(id))
                    .or_insert_with(Vec::new)
                    .push((threshold, ap));
            }
            counts.push(ClassThresholdRow {
                class: class_name(id),
                threshold,
                ap,
                tp,
                fp: hits.len() - tp,
                fn_,
            });
        }
    }
    let aps: Vec<f64> = per_class_ap.values().flatten().map(|&(_, ap)| ap).collect();
    let map_mean = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    EvalReport {
        per_class_ap,
        map_mean,
        ate: (!matched.is_empty()).then(|| matched.iter().sum::<f64>() / matched.len() as f64),
        counts,
        frames: frames.len(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(format!("report encoding: {e}")))
    }

    /// One row per class × threshold: `class,threshold,ap,tp,fp,fn`. A class
    /// without ground truth has an empty `ap` field.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.counts {
            w.serialize(row).map_err(|e| Error::Internal(format!("report CSV: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(format!("report CSV: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(format!("report CSV: {e}")))
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<ClassThresholdRow>> {
        csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("report CSV: {e}")))
    }
}

/// What produces the predictions of [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Predictor {
    Model(Box<Checkpoint>),
    /// Echoes each scene's ground truth with score 1.
    GroundTruthEcho,
}

impl Predictor {
    /// A directory holding [`GT_ECHO_FILE`] is an echo stub; anything else
    /// must be a checkpoint.
    pub fn load(dir: &Path) -> Result<Self> {
        if dir.join(GT_ECHO_FILE).is_file() {
            return Ok(Predictor::GroundTruthEcho);
        }
        Ok(Predictor::Model(Box::new(load_checkpoint(dir)?)))
    }

    pub fn predict(&self, sample: &Sample, score_threshold: f32) -> Result<Vec<DetectionBox>> {
        match self {
            Predictor::GroundTruthEcho => Ok(sample.boxes.iter().map(DetectionBox::from_object).collect()),
            Predictor::Model(ck) => Ok(predict(sample, &ck.params, &ck.manifest.config, score_threshold)?.1),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Predictor::GroundTruthEcho => CLASS_NAMES.len(),
            Predictor::Model(ck) => ck.manifest.config.classes,
        }
    }
}

pub fn write_gt_echo_stub(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(GT_ECHO_FILE);
    fs::write(&path, b"ground-truth echo\n").map_err(|e| Error::io(&path, e))
}

/// Runs `predictor` on every scene under `dataset_dir` (in parallel) and
/// evaluates against the stored boxes.
pub fn evaluate(predictor: &Predictor, dataset_dir: &Path, score_threshold: f32) -> Result<EvalReport> {
    let scenes = list_scenes(dataset_dir)?;
    let frames = scenes
        .par_iter()
        .map(|dir| {
            let sample = Sample::from_scene(&read_scene(dir)?);
            Ok(Frame {
                preds: predictor.predict(&sample, score_threshold)?,
                gts: sample.boxes.iter().map(DetectionBox::from_object).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_frames(&frames, predictor.classes()))
}

/// [`evaluate`] with a checkpoint (or echo stub) directory.
pub fn evaluate_checkpoint(ckpt_dir: &Path, dataset_dir: &Path, score_threshold: f32) -> Result<EvalReport> {
    evaluate(&Predictor::load(ckpt_dir)?, dataset_dir, score_threshold)
}
