use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::geometry::{LanePolyline, TiltedCurveParams};
use crate::matching::{GroundTruthItem, GroundTruthSet, GtLane, Prediction, PredictionSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOps {
    pub flip: bool,
    /// Uniform zoom about the image center; the image size is kept.
    pub scale: f64,
}

impl Default for AugmentOps {
    fn default() -> Self {
        AugmentOps {
            flip: false,
            scale: 1.0,
        }
    }
}

pub fn augment(image: &GrayImage, gts: &GroundTruthSet, ops: &AugmentOps) -> (GrayImage, GroundTruthSet) {
    let (mut image, mut gts) = (image.clone(), gts.clone());
    if ops.scale != 1.0 {
        image = scale_image(&image, ops.scale);
        gts = scale_gts(&gts, ops.scale, image.width(), image.height());
    }
    if ops.flip {
        image = flip_image(&image);
        gts = flip_gts(&gts, image.width());
    }
    (image, gts)
}

pub fn flip_image(image: &GrayImage) -> GrayImage {
    let (w, h) = (image.width(), image.height());
    let mut pixels = Vec::with_capacity(w * h);
    for row in image.pixels().chunks(w) {
        pixels.extend(row.iter().rev());
    }
    GrayImage::new(w, h, pixels).expect("same size")
}

/// Mirrors columns `u -> W - 1 - u` and reverses the left-to-right lane
/// order. Padding entries stay at the end.
pub fn flip_gts(gts: &GroundTruthSet, width: usize) -> GroundTruthSet {
    let axis = width as f64 - 1.0;
    let mut lanes: Vec<GtLane> = gts
        .lanes()
        .map(|lane| {
            let points = lane.polyline.points().iter().map(|&(u, v)| (axis - u, v)).collect();
            GtLane {
                polyline: LanePolyline::new(points).expect("rows unchanged"),
                ..lane.clone()
            }
        })
        .collect();
    lanes.reverse();
    let padding = gts.len() - lanes.len();
    let mut items: Vec<_> = lanes.into_iter().map(GroundTruthItem::Lane).collect();
    items.extend(std::iter::repeat_n(GroundTruthItem::NonLane, padding));
    GroundTruthSet::from_items(items)
}

pub fn flip_params(g: &TiltedCurveParams, width: usize) -> TiltedCurveParams {
    g.mirrored(width as f64 - 1.0)
}

pub fn flip_predictions(preds: &PredictionSet, width: usize) -> PredictionSet {
    let items = preds
        .items()
        .iter()
        .map(|p| Prediction {
            probs: p.probs,
            params: flip_params(&p.params, width),
        })
        .collect();
    PredictionSet::new(items).expect("probabilities unchanged")
}

fn center(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

fn scale_image(image: &GrayImage, s: f64) -> GrayImage {
    let (w, h) = (image.width(), image.height());
    let (cx, cy) = center(w, h);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let sx = (x as f64 - cx) / s + cx;
            let sy = (y as f64 - cy) / s + cy;
            pixels.push(image.sample_bilinear(sx, sy).round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(w, h, pixels).expect("same size")
}

/// Scales polylines about the center and drops points leaving the image.
/// Lanes left with fewer than two points are removed.
fn scale_gts(gts: &GroundTruthSet, s: f64, width: usize, height: usize) -> GroundTruthSet {
    let (cx, cy) = center(width, height);
    let (max_u, max_v) = (width as f64 - 1.0, height as f64 - 1.0);
    let lanes: Vec<GtLane> = gts
        .lanes()
        .filter_map(|lane| {
            let points: Vec<_> = lane
                .polyline
                .points()
                .iter()
                .map(|&(u, v)| (cx + s * (u - cx), cy + s * (v - cy)))
                .filter(|&(u, v)| (0.0..=max_u).contains(&u) && (0.0..=max_v).contains(&v))
                .collect();
            LanePolyline::new(points)
                .ok()
                .map(|p| GtLane::from_polyline(p, height as f64))
        })
        .collect();
    let n = gts.len();
    if gts.items().iter().any(|i| !i.is_lane()) {
        GroundTruthSet::padded(lanes, n).expect("fewer lanes than before")
    } else {
        GroundTruthSet::from_lanes(lanes)
    }
}
