//! On-disk synthetic datasets.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/annotations.jsonl
//! <dir>/scene_00000.pgm
//! <dir>/scene_00000.json
//! ...
//! ```
//!
//! The sidecar of each scene holds the camera, the ground shape and, per lane,
//! the exact curve parameters and the ground-truth polyline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, GenConfig, GrayImage, GroundShape, SyntheticScene};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, LanePolyline, TiltedCurveParams};
use crate::matching::{GroundTruthSet, GtLane};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub generator: GenConfig,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: String,
    pub sidecar: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneRecord {
    pub params: TiltedCurveParams,
    pub ground_offset: f64,
    /// `(u, v)` pixel pairs.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub camera: CameraModel,
    pub center: (f64, f64),
    pub shared_shape: GroundShape,
    pub lanes: Vec<LaneRecord>,
}

/// One image with its unpadded ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub image: GrayImage,
    pub gts: GroundTruthSet,
    pub params: Vec<TiltedCurveParams>,
}

impl From<&SyntheticScene> for Sample {
    fn from(s: &SyntheticScene) -> Self {
        Sample {
            index: s.index,
            image: s.image.clone(),
            gts: s.gts.clone(),
            params: s.params.clone(),
        }
    }
}

fn scene_stem(index: usize) -> String {
    format!("scene_{index:05}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

pub fn write_dataset(dir: &Path, seed: u64, cfg: &GenConfig, scenes: &[SyntheticScene]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    let mut annotations = String::new();
    let rows: Vec<f64> = cfg.sample_rows().map(|r| r as f64).collect();
    for scene in scenes {
        let stem = scene_stem(scene.index);
        let image = format!("{stem}.pgm");
        let sidecar = format!("{stem}.json");
        scene.image.write_pgm(&dir.join(&image))?;
        let record = SceneRecord {
            index: scene.index,
            seed: scene.seed,
            image: image.clone(),
            width: scene.image.width(),
            height: scene.image.height(),
            camera: scene.camera,
            center: scene.center,
            shared_shape: scene.shared_shape,
            lanes: scene
                .params
                .iter()
                .zip(&scene.lane_offsets)
                .zip(scene.gts.lanes())
                .map(|((&params, &ground_offset), lane)| LaneRecord {
                    params,
                    ground_offset,
                    points: lane.polyline.points().to_vec(),
                })
                .collect(),
        };
        write_json(&dir.join(&sidecar), &record)?;
        let line = AnnotationRecord::from_lanes(image.clone(), rows.clone(), scene.gts.lanes());
        annotations.push_str(&serde_json::to_string(&line).map_err(|e| Error::Config(e.to_string()))?);
        annotations.push('\n');
        entries.push(ManifestEntry {
            index: scene.index,
            image,
            sidecar,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        n_scenes: scenes.len(),
        width: cfg.width,
        height: cfg.height,
        generator: cfg.clone(),
        scenes: entries,
    };
    let path = dir.join(ANNOTATIONS_FILE);
    fs::write(&path, annotations).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::io(
            &manifest_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
        ));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let samples = manifest
        .scenes
        .iter()
        .map(|entry| {
            let record: SceneRecord = read_json(&dir.join(&entry.sidecar))?;
            let image = GrayImage::read_pgm(&dir.join(&entry.image))?;
            let h = image.height() as f64;
            let lanes = record
                .lanes
                .iter()
                .map(|l| Ok(GtLane::from_polyline(LanePolyline::new(l.points.clone())?, h)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample {
                index: entry.index,
                image,
                gts: GroundTruthSet::from_lanes(lanes),
                params: record.lanes.iter().map(|l| l.params).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        let scenes = synth_generate(9, 3, &cfg).unwrap();
        let manifest = write_dataset(dir.path(), 9, &cfg, &scenes).unwrap();
        assert_eq!(manifest.scenes.len(), 3);
        let files = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 8);
        let ds = load_dataset(dir.path()).unwrap();
        for (s, scene) in ds.samples.iter().zip(&scenes) {
            assert_eq!(s, &Sample::from(scene));
        }
        let (records, sets) = crate::data::parse_annotations(&dir.path().join(ANNOTATIONS_FILE), 128.0).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].raw_file, "scene_00000.pgm");
        for (set, scene) in sets.iter().zip(&scenes) {
            assert_eq!(set, &scene.gts);
        }
        assert!(load_dataset(&dir.path().join("missing")).is_err());
    }
}
