//! On-disk scene format.
//!
//! One directory per scene:
//!
//! * `sweeps.bin`: little-endian. `u32` sweep count `S`, then `S` `u32` point
//!   counts (current sweep first), then five `f32` columns of `N = Σ counts`
//!   values each: x, y, z, intensity, Δt. Points are in the current ego frame.
//! * `boxes.json`: array of [`ObjectSpec`] at t = 0 in the current ego frame.
//! * `meta.json`: [`SceneMeta`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    aggregate_sweeps, generate_scene_with, simulate_sequence_with, AggregatedCloud, ObjectSpec,
    Pose2, RenderConfig, Scene, SceneConfig, Sweep, SWEEP_PERIOD_S,
};
use crate::error::{Error, Result};

pub const SWEEPS_FILE: &str = "sweeps.bin";
pub const BOXES_FILE: &str = "boxes.json";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: Pose2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub n_sweeps: usize,
    pub sweep_period_s: f64,
    pub extent: f32,
    pub ego_velocity: [f32; 2],
    /// Ego pose per sweep, current first.
    pub ego_trajectory: Vec<TrajectoryEntry>,
}

/// A scene as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub name: String,
    pub cloud: AggregatedCloud,
    pub sweep_counts: Vec<u32>,
    pub boxes: Vec<ObjectSpec>,
    pub meta: SceneMeta,
}

impl SceneData {
    /// All sweeps (the dynamic-branch input).
    pub fn dynamic_cloud(&self) -> &AggregatedCloud {
        &self.cloud
    }

    /// The current sweep alone (the static-branch input).
    pub fn static_cloud(&self) -> AggregatedCloud {
        let n = self.sweep_counts.first().copied().unwrap_or(0) as usize;
        AggregatedCloud {
            points: self.cloud.points[..n].to_vec(),
            labels: Vec::new(),
        }
    }
}

pub fn encode_sweeps(cloud: &AggregatedCloud, counts: &[u32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + counts.len() * 4 + cloud.len() * 20);
    buf.extend_from_slice(&(counts.len() as u32).to_le_bytes());
    for c in counts {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for col in 0..5 {
        for p in &cloud.points {
            buf.extend_from_slice(&p[col].to_le_bytes());
        }
    }
    buf
}

pub fn decode_sweeps(bytes: &[u8]) -> Result<(AggregatedCloud, Vec<u32>)> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|s| [s[0], s[1], s[2], s[3]])
            .ok_or_else(|| Error::Format(format!("sweeps file truncated at word {i}")))
    };
    let n_sweeps = u32::from_le_bytes(word(0)?) as usize;
    let counts: Vec<u32> = (0..n_sweeps)
        .map(|i| word(1 + i).map(u32::from_le_bytes))
        .collect::<Result<_>>()?;
    let total: usize = counts.iter().map(|&c| c as usize).sum();
    let base = 1 + n_sweeps;
    if bytes.len() != (base + 5 * total) * 4 {
        return Err(Error::Format(format!(
            "sweeps file has {} bytes, expected {}",
            bytes.len(),
            (base + 5 * total) * 4
        )));
    }
    let mut points = vec![[0f32; 5]; total];
    for col in 0..5 {
        for (i, p) in points.iter_mut().enumerate() {
            p[col] = f32::from_le_bytes(word(base + col * total + i)?);
        }
    }
    Ok((
        AggregatedCloud {
            points,
            labels: Vec::new(),
        },
        counts,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_scene(dir: &Path, scene: &Scene, sweeps: &[Sweep]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cloud = aggregate_sweeps(sweeps)?;
    let counts: Vec<u32> = sweeps.iter().map(|s| s.points.len() as u32).collect();
    let path = dir.join(SWEEPS_FILE);
    fs::write(&path, encode_sweeps(&cloud, &counts)).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(BOXES_FILE), &scene.ground_truth())?;
    let meta = SceneMeta {
        seed: scene.seed,
        n_sweeps: sweeps.len(),
        sweep_period_s: SWEEP_PERIOD_S,
        extent: scene.extent,
        ego_velocity: scene.ego_velocity,
        ego_trajectory: sweeps
            .iter()
            .map(|s| TrajectoryEntry {
                timestamp: s.timestamp,
                pose: s.ego_pose,
            })
            .collect(),
    };
    write_json(&dir.join(META_FILE), &meta)
}

pub fn read_scene(dir: &Path) -> Result<SceneData> {
    let path = dir.join(SWEEPS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (cloud, sweep_counts) = decode_sweeps(&bytes)?;
    let boxes: Vec<ObjectSpec> = read_json(&dir.join(BOXES_FILE))?;
    for b in &boxes {
        b.validate()?;
    }
    let meta: SceneMeta = read_json(&dir.join(META_FILE))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SceneData {
        name,
        cloud,
        sweep_counts,
        boxes,
        meta,
    })
}

/// Scene directories under `root`, sorted by name.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.is_dir() && p.join(SWEEPS_FILE).exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub objects: usize,
    pub sweeps: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub render: RenderConfig,
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Generates `spec.scenes` scenes under `root`. Scene `i` uses seed
/// `spec.seed + i`.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    (0..spec.scenes)
        .map(|i| {
            let seed = spec.seed.wrapping_add(i as u64);
            let scene = generate_scene_with(seed, spec.objects, &spec.scene)?;
            let sweeps = simulate_sequence_with(&scene, spec.sweeps, &spec.render)?;
            let dir = root.join(scene_dir_name(i));
            write_scene(&dir, &scene, &sweeps)?;
            Ok(dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlidar::{generate_scene, simulate_sequence};

    #[test]
    fn scene_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let scene = generate_scene(5, 3, 12.0).unwrap();
        let sweeps = simulate_sequence(&scene, 4).unwrap();
        let dir = tmp.path().join("s");
        write_scene(&dir, &scene, &sweeps).unwrap();
        let data = read_scene(&dir).unwrap();
        let agg = aggregate_sweeps(&sweeps).unwrap();
        assert_eq!(data.cloud.points, agg.points);
        assert_eq!(data.sweep_counts.len(), 4);
        assert_eq!(data.boxes, scene.ground_truth());
        assert_eq!(data.static_cloud().len(), sweeps[0].points.len());
        assert!(data.static_cloud().points.iter().all(|p| p[4] == 0.0));
        assert_eq!(data.meta.ego_trajectory.len(), 4);
    }

    #[test]
    fn truncated_file_rejected() {
        let cloud = AggregatedCloud {
            points: vec![[1.0, 2.0, 3.0, 0.5, 0.0]],
            labels: vec![],
        };
        let mut bytes = encode_sweeps(&cloud, &[1]);
        assert_eq!(decode_sweeps(&bytes).unwrap().0.points, cloud.points);
        bytes.pop();
        assert!(matches!(decode_sweeps(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_reports_path() {
        let tmp = tempfile::tempdir().unwrap();
        let err = read_scene(tmp.path()).unwrap_err();
        assert!(err.to_string().contains(SWEEPS_FILE), "{err}");
    }
}
