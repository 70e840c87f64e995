//! Point accuracy and lane-level false positive / false negative rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{hungarian_solve, GroundTruthSet, Prediction, PredictionSet};

/// Threshold in pixels at the reference height of 720 rows.
pub const REFERENCE_THRESHOLD_PX: f64 = 20.0;
pub const REFERENCE_HEIGHT: f64 = 720.0;

/// The reference threshold scaled to an image of `image_h` rows.
pub fn scaled_threshold(image_h: f64) -> f64 {
    REFERENCE_THRESHOLD_PX * image_h / REFERENCE_HEIGHT
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold_px: f64,
    /// Slots with a lane probability above this count as predicted lanes.
    pub lane_prob: f64,
    /// Matched lanes below this point accuracy count as FP and FN.
    pub min_lane_accuracy: f64,
}

impl EvalOptions {
    pub fn new(threshold_px: f64) -> Self {
        EvalOptions {
            threshold_px,
            lane_prob: 0.5,
            min_lane_accuracy: 0.85,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClipStats {
    pub correct_points: usize,
    pub gt_points: usize,
    pub pred_lanes: usize,
    pub gt_lanes: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ClipStats {
    fn add(&mut self, o: &ClipStats) {
        self.correct_points += o.correct_points;
        self.gt_points += o.gt_points;
        self.pred_lanes += o.pred_lanes;
        self.gt_lanes += o.gt_lanes;
        self.false_positives += o.false_positives;
        self.false_negatives += o.false_negatives;
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct_points, self.gt_points, 1.0)
    }
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub totals: ClipStats,
    pub per_clip: BTreeMap<usize, ClipStats>,
}

/// Evaluates with every image as its own clip.
pub fn evaluate(
    preds: &[PredictionSet],
    gts: &[GroundTruthSet],
    image_h: f64,
    threshold_px: f64,
) -> Result<EvalResult> {
    let clips: Vec<usize> = (0..preds.len()).collect();
    evaluate_with(preds, gts, &clips, image_h, &EvalOptions::new(threshold_px))
}

pub fn evaluate_with(
    preds: &[PredictionSet],
    gts: &[GroundTruthSet],
    clips: &[usize],
    image_h: f64,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if preds.len() != gts.len() || clips.len() != gts.len() {
        return Err(Error::Alignment(format!(
            "{} predictions, {} ground-truth sets, {} clip keys",
            preds.len(),
            gts.len(),
            clips.len()
        )));
    }
    let mut per_clip: BTreeMap<usize, ClipStats> = BTreeMap::new();
    for (i, ((p, g), clip)) in preds.iter().zip(gts).zip(clips).enumerate() {
        let stats = evaluate_image(p, g, image_h, opts).map_err(|e| match e {
            Error::Alignment(m) => Error::Alignment(format!("image {i}: {m}")),
            other => other,
        })?;
        per_clip.entry(*clip).or_default().add(&stats);
    }
    let mut totals = ClipStats::default();
    per_clip.values().for_each(|s| totals.add(s));
    Ok(EvalResult {
        accuracy: totals.accuracy(),
        fp_rate: ratio(totals.false_positives, totals.pred_lanes, 0.0),
        fn_rate: ratio(totals.false_negatives, totals.gt_lanes, 0.0),
        totals,
        per_clip,
    })
}

fn evaluate_image(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    image_h: f64,
    opts: &EvalOptions,
) -> Result<ClipStats> {
    let lanes: Vec<&Prediction> = preds
        .items()
        .iter()
        .filter(|p| p.lane_prob() > opts.lane_prob)
        .collect();
    let truth: Vec<_> = gts.lanes().collect();
    for lane in &truth {
        if lane.polyline.rows().any(|v| !(0.0..=image_h).contains(&v)) {
            return Err(Error::Alignment(format!(
                "ground-truth row outside an image of height {image_h}"
            )));
        }
    }
    let counts: Vec<Vec<usize>> = truth
        .iter()
        .map(|gt| {
            lanes
                .iter()
                .map(|p| {
                    gt.polyline
                        .points()
                        .iter()
                        .filter(|&&(u, v)| {
                            p.params
                                .eval(v)
                                .is_ok_and(|pu| (pu - u).abs() <= opts.threshold_px)
                        })
                        .count()
                })
                .collect()
        })
        .collect();

    let mut stats = ClipStats {
        gt_points: truth.iter().map(|l| l.polyline.len()).sum(),
        pred_lanes: lanes.len(),
        gt_lanes: truth.len(),
        ..ClipStats::default()
    };
    let n = lanes.len().max(truth.len());
    if lanes.is_empty() || truth.is_empty() {
        stats.false_positives = lanes.len();
        stats.false_negatives = truth.len();
        return Ok(stats);
    }
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|g| {
            (0..n)
                .map(|p| match (counts.get(g), lanes.get(p)) {
                    (Some(row), Some(_)) => -(row[p] as f64),
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    let assignment = hungarian_solve(&cost)?;
    let mut matched_good = 0;
    for (g, gt) in truth.iter().enumerate() {
        let p = assignment.prediction_for(g);
        if p >= lanes.len() {
            continue;
        }
        let correct = counts[g][p];
        stats.correct_points += correct;
        if correct as f64 / gt.polyline.len() as f64 >= opts.min_lane_accuracy {
            matched_good += 1;
        }
    }
    stats.false_positives = lanes.len() - matched_good;
    stats.false_negatives = truth.len() - matched_good;
    Ok(stats)
}
