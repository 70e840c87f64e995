//! Line-delimited JSON lane annotations.
//!
//! Each line holds `raw_file`, `h_samples` (row coordinates) and `lanes`, one
//! list of columns per lane aligned with `h_samples`, where `-2` marks a row
//! without that lane.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::LanePolyline;
use crate::matching::{GroundTruthSet, GtLane};

/// Column value marking an absent point.
pub const ABSENT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub raw_file: String,
    pub h_samples: Vec<f64>,
    pub lanes: Vec<Vec<f64>>,
}

impl AnnotationRecord {
    /// Record sampling each lane at `h_samples`; rows a lane does not cover
    /// hold [`ABSENT`].
    pub fn from_lanes<'a>(
        raw_file: impl Into<String>,
        h_samples: Vec<f64>,
        lanes: impl IntoIterator<Item = &'a GtLane>,
    ) -> Self {
        let lanes = lanes
            .into_iter()
            .map(|lane| {
                h_samples
                    .iter()
                    .map(|&v| {
                        lane.polyline
                            .points()
                            .iter()
                            .find(|p| p.1 == v)
                            .map_or(ABSENT, |p| p.0)
                    })
                    .collect()
            })
            .collect();
        AnnotationRecord {
            raw_file: raw_file.into(),
            h_samples,
            lanes,
        }
    }

    /// Lanes with at least two valid points, boundaries normalized by `image_h`.
    pub fn ground_truth(&self, image_h: f64) -> Result<GroundTruthSet> {
        let mut lanes = Vec::new();
        for lane in &self.lanes {
            let points: Vec<(f64, f64)> = lane
                .iter()
                .zip(&self.h_samples)
                .filter(|(&u, _)| u != ABSENT)
                .map(|(&u, &v)| (u, v))
                .collect();
            if points.len() < 2 {
                continue;
            }
            lanes.push(GtLane::from_polyline(LanePolyline::new(points)?, image_h));
        }
        Ok(GroundTruthSet::from_lanes(lanes))
    }
}

pub fn parse_annotations(path: &Path, image_h: f64) -> Result<(Vec<AnnotationRecord>, Vec<GroundTruthSet>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text, image_h)
}

pub fn parse_annotations_str(
    text: &str,
    image_h: f64,
) -> Result<(Vec<AnnotationRecord>, Vec<GroundTruthSet>)> {
    let mut records = Vec::new();
    let mut sets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = record_from_value(&value, line_no)?;
        let gts = record.ground_truth(image_h).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(record);
        sets.push(gts);
    }
    Ok((records, sets))
}

fn record_from_value(value: &Value, line: usize) -> Result<AnnotationRecord> {
    let schema = |field: &str| Error::Schema {
        line,
        field: field.to_string(),
    };
    let numbers = |v: &Value, field: &str| -> Result<Vec<f64>> {
        v.as_array()
            .ok_or_else(|| schema(field))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| schema(field)))
            .collect()
    };
    let raw_file = value
        .get("raw_file")
        .and_then(Value::as_str)
        .ok_or_else(|| schema("raw_file"))?
        .to_string();
    let h_samples = numbers(value.get("h_samples").ok_or_else(|| schema("h_samples"))?, "h_samples")?;
    let lanes = value
        .get("lanes")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("lanes"))?
        .iter()
        .map(|lane| numbers(lane, "lanes"))
        .collect::<Result<Vec<_>>>()?;
    if lanes.iter().any(|l| l.len() != h_samples.len()) {
        return Err(Error::Parse {
            line,
            message: "lane length differs from h_samples length".into(),
        });
    }
    Ok(AnnotationRecord {
        raw_file,
        h_samples,
        lanes,
    })
}
