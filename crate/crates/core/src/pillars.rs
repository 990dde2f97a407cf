//! Pillar voxelization, the per-pillar feature encoder (VFE), and scattering
//! pillar features onto a dense bird's-eye-view grid.
//!
//! Grid layout: a BEV map is `[C, H, W]`; columns run along x, rows along y.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthlidar::AggregatedCloud;
use crate::tensor::{stable_hash, ParamStore, Tape, Tensor, Var, RELU_GAIN};

/// Decorated per-point feature width:
/// `(x, y, z, intensity, Δt, x-x̄, y-ȳ, z-z̄, x-x_c, y-y_c)`.
pub const POINT_FEATURES: usize = 10;

/// Voxel size of the CenterPoint reference configuration (x, y, z).
pub const CENTERPOINT_VOXEL_SIZE: [f32; 3] = [0.075, 0.075, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub x_range: [f32; 2],
    pub y_range: [f32; 2],
    pub z_range: [f32; 2],
    pub pillar_size: f32,
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
    /// Mixed with the cell index to seed per-pillar subsampling.
    #[serde(default)]
    pub subsample_seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GridConfig {
    /// ±12.8 m at 0.2 m pillars: a 128×128 grid.
    pub fn desk() -> Self {
        Self::square(12.8, 0.2)
    }

    /// Square grid `[-half, half)²` with z in `[-5, 3)`.
    pub fn square(half: f32, pillar_size: f32) -> Self {
        Self {
            x_range: [-half, half],
            y_range: [-half, half],
            z_range: [-5.0, 3.0],
            pillar_size,
            max_points_per_pillar: 32,
            max_pillars: 16_384,
            subsample_seed: 0,
        }
    }

    /// Full-range PointPillars setting with the 0.2 m pillar of the public
    /// nuScenes PointPillars configs.
    pub fn pointpillars_nuscenes() -> Self {
        Self {
            max_points_per_pillar: 20,
            max_pillars: 30_000,
            ..Self::square(51.2, 0.2)
        }
    }

    /// CenterPoint voxel size (0.075 m) used as pillar size; ±54 m keeps
    /// the span divisible by the voxel.
    pub fn centerpoint_nuscenes() -> Self {
        Self {
            max_points_per_pillar: 10,
            max_pillars: 120_000,
            ..Self::square(54.0, CENTERPOINT_VOXEL_SIZE[0])
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "pointpillars-nuscenes" => Ok(Self::pointpillars_nuscenes()),
            "centerpoint-nuscenes" => Ok(Self::centerpoint_nuscenes()),
            other => Err(Error::Config(format!("unknown grid preset `{other}`"))),
        }
    }

    fn cells_along(&self, range: [f32; 2], axis: &str) -> Result<usize> {
        let span = (range[1] - range[0]) as f64;
        if !(span > 0.0) {
            return Err(Error::Config(format!("{axis} range {range:?} is empty")));
        }
        let n = span / self.pillar_size as f64;
        if (n - n.round()).abs() > 1e-4 {
            return Err(Error::Config(format!(
                "{axis} span {span} is not divisible by pillar size {}",
                self.pillar_size
            )));
        }
        Ok(n.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pillar_size > 0.0) {
            return Err(Error::Config("pillar size must be positive".into()));
        }
        self.cells_along(self.x_range, "x")?;
        self.cells_along(self.y_range, "y")?;
        if !(self.z_range[1] > self.z_range[0]) {
            return Err(Error::Config(format!("z range {:?} is empty", self.z_range)));
        }
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 {
            return Err(Error::Config(
                "max_points_per_pillar and max_pillars must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.cells_along(self.x_range, "x").unwrap_or(0)
    }

    pub fn height(&self) -> usize {
        self.cells_along(self.y_range, "y").unwrap_or(0)
    }

    /// `(column, row)` of a point, or `None` outside the x/y/z range.
    pub fn cell_of(&self, p: &[f32; 5]) -> Option<(usize, usize)> {
        let in_range = |v: f32, r: [f32; 2]| v >= r[0] && v < r[1];
        if !(in_range(p[0], self.x_range) && in_range(p[1], self.y_range) && in_range(p[2], self.z_range)) {
            return None;
        }
        let ix = ((p[0] - self.x_range[0]) / self.pillar_size).floor() as usize;
        let iy = ((p[1] - self.y_range[0]) / self.pillar_size).floor() as usize;
        (ix < self.width() && iy < self.height()).then_some((ix, iy))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f32; 2] {
        [
            self.x_range[0] + (ix as f32 + 0.5) * self.pillar_size,
            self.y_range[0] + (iy as f32 + 0.5) * self.pillar_size,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pillar {
    pub ix: usize,
    pub iy: usize,
    /// Flat cell index `iy * width + ix`.
    pub cell: usize,
    /// Kept points, in canonical (sorted) order.
    pub points: Vec<[f32; 5]>,
    /// Points that fell into the cell before truncation.
    pub raw_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PillarSet {
    /// Sorted by cell index.
    pub pillars: Vec<Pillar>,
    pub width: usize,
    pub height: usize,
    /// Points inside the grid range before any truncation.
    pub in_range_points: usize,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.pillars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pillars.is_empty()
    }

    pub fn kept_points(&self) -> usize {
        self.pillars.iter().map(|p| p.points.len()).sum()
    }
}

fn canonical_cmp(a: &[f32; 5], b: &[f32; 5]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Buckets points into pillars. Within a pillar points are put in canonical
/// order before subsampling, and the subsample is seeded by the cell index,
/// so the result does not depend on input point order.
pub fn pillarize(cloud: &AggregatedCloud, cfg: &GridConfig) -> Result<PillarSet> {
    cfg.validate()?;
    let width = cfg.width();
    let mut buckets: BTreeMap<usize, Vec<[f32; 5]>> = BTreeMap::new();
    let mut in_range = 0;
    for p in &cloud.points {
        if let Some((ix, iy)) = cfg.cell_of(p) {
            buckets.entry(iy * width + ix).or_default().push(*p);
            in_range += 1;
        }
    }

    let mut pillars: Vec<Pillar> = buckets
        .into_iter()
        .map(|(cell, mut pts)| {
            pts.sort_by(canonical_cmp);
            let raw_count = pts.len();
            if raw_count > cfg.max_points_per_pillar {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(cfg.subsample_seed ^ stable_hash(&cell.to_le_bytes()));
                let mut idx = sample(&mut rng, raw_count, cfg.max_points_per_pillar).into_vec();
                idx.sort_unstable();
                pts = idx.into_iter().map(|i| pts[i]).collect();
            }
            Pillar {
                ix: cell % width,
                iy: cell / width,
                cell,
                points: pts,
                raw_count,
            }
        })
        .collect();

    if pillars.len() > cfg.max_pillars {
        pillars.sort_by(|a, b| b.raw_count.cmp(&a.raw_count).then(a.cell.cmp(&b.cell)));
        pillars.truncate(cfg.max_pillars);
        pillars.sort_by_key(|p| p.cell);
    }

    Ok(PillarSet {
        pillars,
        width,
        height: cfg.height(),
        in_range_points: in_range,
    })
}

/// Per-point decorated features for one pillar.
pub fn decorate(p: &Pillar, cfg: &GridConfig) -> Vec<[f32; POINT_FEATURES]> {
    let n = p.points.len().max(1) as f64;
    let mean: [f64; 3] = std::array::from_fn(|k| p.points.iter().map(|q| q[k] as f64).sum::<f64>() / n);
    // cell center in f64: the f32 center is off by up to ~1e-6 at ±12.8 m
    let cx = cfg.x_range[0] as f64 + (p.ix as f64 + 0.5) * cfg.pillar_size as f64;
    let cy = cfg.y_range[0] as f64 + (p.iy as f64 + 0.5) * cfg.pillar_size as f64;
    p.points
        .iter()
        .map(|q| {
            [
                q[0],
                q[1],
                q[2],
                q[3],
                q[4],
                (q[0] as f64 - mean[0]) as f32,
                (q[1] as f64 - mean[1]) as f32,
                (q[2] as f64 - mean[2]) as f32,
                (q[0] as f64 - cx) as f32,
                (q[1] as f64 - cy) as f32,
            ]
        })
        .collect()
}

/// Allocates the shared point-wise linear layer of one VFE.
pub fn init_vfe(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.init_uniform(&format!("{prefix}.weight"), &[POINT_FEATURES, channels], POINT_FEATURES, RELU_GAIN)?;
    store.init_zeros(&format!("{prefix}.bias"), &[channels])
}

/// Linear + ReLU on every decorated point, then max over each pillar's
/// points. Returns a `[P, C]` variable.
pub fn encode_pillars_on(
    tape: &mut Tape,
    pillars: &PillarSet,
    grid: &GridConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    let mut rows = Vec::with_capacity(pillars.kept_points() * POINT_FEATURES);
    let mut offsets = Vec::with_capacity(pillars.len() + 1);
    offsets.push(0);
    for p in &pillars.pillars {
        for f in decorate(p, grid) {
            rows.extend_from_slice(&f);
        }
        offsets.push(rows.len() / POINT_FEATURES);
    }
    let n = rows.len() / POINT_FEATURES;
    let x = tape.constant(Tensor::new(vec![n, POINT_FEATURES], rows)?);
    let h = tape.linear(x, w, b)?;
    let h = tape.relu(h);
    tape.segment_max(h, &offsets)
}

/// Encoded pillars: one feature row per pillar plus its grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarFeatures {
    pub features: Tensor,
    pub cells: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

pub fn encode_pillars(
    pillars: &PillarSet,
    grid: &GridConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<PillarFeatures> {
    let mut tape = Tape::new();
    let v = encode_pillars_on(&mut tape, pillars, grid, params, prefix)?;
    Ok(PillarFeatures {
        features: tape.value(v).clone(),
        cells: pillars.pillars.iter().map(|p| p.cell).collect(),
        width: pillars.width,
        height: pillars.height,
    })
}

/// Dense `[C, H, W]` bird's-eye-view feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeatureMap {
    pub data: Tensor,
    /// Meters per cell.
    pub stride_meters: f32,
    /// Cells that received a pillar, when known.
    pub occupancy: Option<Vec<bool>>,
}

impl BevFeatureMap {
    pub fn new(data: Tensor, stride_meters: f32) -> Result<Self> {
        data.dims3()?;
        Ok(Self {
            data,
            stride_meters,
            occupancy: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Number of cells with any nonzero channel.
    pub fn nonzero_cells(&self) -> usize {
        let plane = self.height() * self.width();
        (0..plane)
            .filter(|&cell| (0..self.channels()).any(|c| self.data.data()[c * plane + cell] != 0.0))
            .count()
    }

    pub fn occupied_fraction(&self) -> f64 {
        let plane = (self.height() * self.width()).max(1);
        let occupied = match &self.occupancy {
            Some(mask) => mask.iter().filter(|&&m| m).count(),
            None => self.nonzero_cells(),
        };
        occupied as f64 / plane as f64
    }
}

pub fn scatter_to_bev(features: &PillarFeatures, grid: &GridConfig) -> Result<BevFeatureMap> {
    let mut tape = Tape::new();
    let x = tape.constant(features.features.clone());
    let m = tape.scatter_rows(x, &features.cells, features.height, features.width)?;
    let mut occupancy = vec![false; features.height * features.width];
    for &c in &features.cells {
        occupancy[c] = true;
    }
    Ok(BevFeatureMap {
        data: tape.value(m).clone(),
        stride_meters: grid.pillar_size,
        occupancy: Some(occupancy),
    })
}

/// Cloud to BEV map on a tape: pillarize, encode, scatter. `[C, H, W]`.
pub fn bev_on(
    tape: &mut Tape,
    cloud: &AggregatedCloud,
    grid: &GridConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<Var> {
    let pillars = pillarize(cloud, grid)?;
    let feats = encode_pillars_on(tape, &pillars, grid, params, prefix)?;
    let cells: Vec<usize> = pillars.pillars.iter().map(|p| p.cell).collect();
    tape.scatter_rows(feats, &cells, pillars.height, pillars.width)
}
