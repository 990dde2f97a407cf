//! Center-based single-stage head.
//!
//! Per output cell: `classes + 1` class logits (channel 0 is background),
//! [`REG_DIMS`] box regression values, and 2 direction logits. A cell is
//! positive iff a ground-truth BEV center falls in it.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::pillars::BevFeatureMap;
use crate::synthlidar::{wrap_angle, ObjectSpec};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// `Δx, Δy` (cell units from the cell center), `z`, `ln l, ln w, ln h`,
/// `sin yaw, cos yaw`.
pub const REG_DIMS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub class_id: u8,
    pub center: [f32; 3],
    /// Length, width, height.
    pub size: [f32; 3],
    pub yaw: f32,
    pub score: f32,
}

impl DetectionBox {
    /// A ground-truth box as a detection with score 1.
    pub fn from_object(o: &ObjectSpec) -> Self {
        Self {
            class_id: o.class_id,
            center: o.center,
            size: o.size,
            yaw: o.yaw,
            score: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Input(format!("box size {:?} must be positive", self.size)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Input(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

/// Geometry of the head's output grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadGrid {
    pub x0: f32,
    pub y0: f32,
    /// Cell edge, meters.
    pub cell: f32,
    pub width: usize,
    pub height: usize,
}

impl HeadGrid {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// `(column, row)` holding a BEV point, if inside the grid.
    pub fn cell_of(&self, x: f32, y: f32) -> Option<(usize, usize)> {
        let fx = ((x - self.x0) / self.cell).floor();
        let fy = ((y - self.y0) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        (ix < self.width && iy < self.height).then_some((ix, iy))
    }

    pub fn center(&self, ix: usize, iy: usize) -> [f32; 2] {
        [
            self.x0 + (ix as f32 + 0.5) * self.cell,
            self.y0 + (iy as f32 + 0.5) * self.cell,
        ]
    }
}

/// Direction class: 1 iff the wrapped yaw is nonnegative.
pub fn dir_target(yaw: f32) -> usize {
    usize::from(wrap_angle(yaw as f64) >= 0.0)
}

pub fn encode_box(b: &DetectionBox, ix: usize, iy: usize, g: &HeadGrid) -> [f32; REG_DIMS] {
    let [cx, cy] = g.center(ix, iy);
    [
        (b.center[0] - cx) / g.cell,
        (b.center[1] - cy) / g.cell,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Inverse of [`encode_box`]; the score is left at 0.
pub fn decode_box(reg: &[f32], class_id: u8, ix: usize, iy: usize, g: &HeadGrid) -> DetectionBox {
    let [cx, cy] = g.center(ix, iy);
    DetectionBox {
        class_id,
        center: [cx + reg[0] * g.cell, cy + reg[1] * g.cell, reg[2]],
        size: [reg[3].exp(), reg[4].exp(), reg[5].exp()],
        yaw: reg[6].atan2(reg[7]),
        score: 0.0,
    }
}

/// Per-cell training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Class index per cell; 0 is background, `c + 1` is class `c`.
    pub cls: Vec<usize>,
    /// Positive cells in increasing order.
    pub positives: Vec<usize>,
    /// Regression target per positive cell.
    pub reg: Vec<[f32; REG_DIMS]>,
    /// Direction class per positive cell.
    pub dir: Vec<usize>,
}

/// Nearest-cell assignment. When two centers share a cell the box whose
/// center is closer to the cell center wins (ties: lower index). Boxes
/// outside the grid are ignored.
pub fn assign_targets(boxes: &[DetectionBox], g: &HeadGrid) -> Targets {
    let mut owner: Vec<Option<(f32, usize)>> = vec![None; g.cells()];
    for (i, b) in boxes.iter().enumerate() {
        let Some((ix, iy)) = g.cell_of(b.center[0], b.center[1]) else {
            continue;
        };
        let [cx, cy] = g.center(ix, iy);
        let d = (b.center[0] - cx).hypot(b.center[1] - cy);
        let slot = &mut owner[iy * g.width + ix];
        if slot.is_none_or(|(best, _)| d < best) {
            *slot = Some((d, i));
        }
    }
    let mut t = Targets {
        cls: vec![0; g.cells()],
        positives: Vec::new(),
        reg: Vec::new(),
        dir: Vec::new(),
    };
    for (cell, slot) in owner.iter().enumerate() {
        if let Some((_, i)) = *slot {
            let b = &boxes[i];
            t.cls[cell] = b.class_id as usize + 1;
            t.positives.push(cell);
            t.reg.push(encode_box(b, cell % g.width, cell / g.width, g));
            t.dir.push(dir_target(b.yaw));
        }
    }
    t
}

/// Initial probability of each foreground class at every cell.
pub const FOREGROUND_PRIOR: f64 = 0.01;

/// `head.conv` and `head.out`. The background logit's bias starts at
/// `ln(classes·(1 − π)/π)` so every foreground class starts near
/// probability π = [`FOREGROUND_PRIOR`]; without it the background cells'
/// focal terms dominate the first steps.
pub fn init_head(store: &mut ParamStore, in_channels: usize, classes: usize) -> Result<()> {
    store.init_conv("head.conv", in_channels, in_channels, 3)?;
    store.init_conv("head.out", in_channels, classes + 1 + REG_DIMS + 2, 1)?;
    let pi = FOREGROUND_PRIOR;
    store.get_mut("head.out.bias")?.data_mut()[0] = (classes as f64 * (1.0 - pi) / pi).ln() as f32;
    Ok(())
}

/// `head.conv` (3×3, ReLU) then `head.out` (1×1). Output `[K, H, W]`.
pub fn head_on(tape: &mut Tape, head_in: Var, params: &ParamStore) -> Result<Var> {
    let x = tape.conv_named(params, "head.conv", head_in, 1, 1)?;
    let x = tape.relu(x);
    tape.conv_named(params, "head.out", x, 1, 0)
}

/// Dense head output `[K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHead {
    pub data: Tensor,
    pub classes: usize,
}

impl DenseHead {
    pub fn new(data: Tensor, classes: usize) -> Result<Self> {
        let (k, _, _) = data.dims3()?;
        if k != classes + 1 + REG_DIMS + 2 {
            return Err(Error::Dimension(format!(
                "head has {k} channels, expected {} for {classes} classes",
                classes + 1 + REG_DIMS + 2
            )));
        }
        Ok(Self { data, classes })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Channel `ch` at `cell`.
    pub fn at(&self, ch: usize, cell: usize) -> f32 {
        self.data.data()[ch * self.height() * self.width() + cell]
    }

    pub fn class_logits(&self, cell: usize) -> Vec<f32> {
        (0..=self.classes).map(|c| self.at(c, cell)).collect()
    }

    pub fn regression(&self, cell: usize) -> [f32; REG_DIMS] {
        std::array::from_fn(|i| self.at(self.classes + 1 + i, cell))
    }

    pub fn dir_logits(&self, cell: usize) -> [f32; 2] {
        let base = self.classes + 1 + REG_DIMS;
        [self.at(base, cell), self.at(base + 1, cell)]
    }
}

pub fn detection_head(head_in: &BevFeatureMap, params: &ParamStore, cfg: &ModelConfig) -> Result<DenseHead> {
    let mut tape = Tape::new();
    let x = tape.constant(head_in.data.clone());
    let y = head_on(&mut tape, x, params)?;
    DenseHead::new(tape.value(y).clone(), cfg.classes)
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per cell, the most probable non-background class; kept when its
/// probability reaches `score_threshold`. Sorted by descending score, ties
/// by cell index.
pub fn decode_detections(head: &DenseHead, g: &HeadGrid, score_threshold: f32) -> Vec<DetectionBox> {
    let mut out: Vec<(usize, DetectionBox)> = Vec::new();
    for cell in 0..head.height() * head.width() {
        let p = softmax(&head.class_logits(cell));
        let (best, score) = p[1..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
        if (score as f32) < score_threshold {
            continue;
        }
        let mut b = decode_box(&head.regression(cell), best as u8, cell % head.width(), cell / head.width(), g);
        b.score = (score as f32).clamp(0.0, 1.0);
        out.push((cell, b));
    }
    out.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(_, b)| b).collect()
}
