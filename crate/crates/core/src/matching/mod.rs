//! Set matching between predicted curves and ground-truth lanes.
//!
//! Ground truth is padded with non-lanes to the prediction slot count `N`,
//! matched one-to-one with [`hungarian_solve`] on the probability-based cost of
//! [`matching_cost`], and the matched pairs are scored with the log-probability
//! regression loss of [`hungarian_fitting_loss`].
//!
//! Curve distances are mean absolute column errors (pixels) over the
//! ground-truth rows; boundary distances are the mean of the two absolute
//! errors on normalized `alpha`/`beta`.

mod hungarian;

pub use hungarian::{hungarian_solve, Assignment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LanePolyline, TiltedCurveParams, TILTED_PARAM_COUNT};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Rows within this distance of a predicted pole are singular.
pub const SINGULAR_ROW_EPS: f64 = 1e-6;
/// Offset applied to singular rows when they are perturbed instead of rejected.
pub const SINGULAR_ROW_SHIFT: f64 = 1e-3;

/// One prediction slot: class distribution `(non-lane, lane)` plus a curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; 2],
    pub params: TiltedCurveParams,
}

impl Prediction {
    pub fn lane_prob(&self) -> f64 {
        self.probs[1]
    }

    fn class_prob(&self, is_lane: bool) -> f64 {
        self.probs[usize::from(is_lane)]
    }
}

/// The `N` prediction slots of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    items: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(items: Vec<Prediction>) -> Result<Self> {
        for (i, p) in items.iter().enumerate() {
            let [a, b] = p.probs;
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || (a + b - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!(
                    "slot {i}: class probabilities {:?} are not a distribution",
                    p.probs
                )));
            }
        }
        Ok(PredictionSet { items })
    }

    pub fn items(&self) -> &[Prediction] {
        &self.items
    }

    /// Swaps `alpha` and `beta` of slots where `alpha > beta`.
    pub fn order_boundaries(&mut self) {
        for p in &mut self.items {
            if p.params.alpha > p.params.beta {
                std::mem::swap(&mut p.params.alpha, &mut p.params.beta);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A real ground-truth lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtLane {
    pub polyline: LanePolyline,
    pub alpha: f64,
    pub beta: f64,
}

impl GtLane {
    /// Boundaries taken from the first and last polyline rows.
    pub fn from_polyline(polyline: LanePolyline, image_h: f64) -> Self {
        GtLane {
            alpha: polyline.first_row() / image_h,
            beta: polyline.last_row() / image_h,
            polyline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GroundTruthItem {
    Lane(GtLane),
    NonLane,
}

impl GroundTruthItem {
    pub fn is_lane(&self) -> bool {
        matches!(self, GroundTruthItem::Lane(_))
    }

    pub fn lane(&self) -> Option<&GtLane> {
        match self {
            GroundTruthItem::Lane(l) => Some(l),
            GroundTruthItem::NonLane => None,
        }
    }
}

/// Ground-truth lanes padded with non-lanes to the slot count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    items: Vec<GroundTruthItem>,
}

impl GroundTruthSet {
    /// Real lanes first, then padding up to `n`.
    pub fn padded(lanes: Vec<GtLane>, n: usize) -> Result<Self> {
        if lanes.len() > n {
            return Err(Error::Domain(format!(
                "{} lanes exceed the {n} prediction slots",
                lanes.len()
            )));
        }
        let mut items: Vec<_> = lanes.into_iter().map(GroundTruthItem::Lane).collect();
        items.resize(n, GroundTruthItem::NonLane);
        Ok(GroundTruthSet { items })
    }

    pub fn from_items(items: Vec<GroundTruthItem>) -> Self {
        GroundTruthSet { items }
    }

    /// Unpadded set holding only real lanes.
    pub fn from_lanes(lanes: Vec<GtLane>) -> Self {
        GroundTruthSet {
            items: lanes.into_iter().map(GroundTruthItem::Lane).collect(),
        }
    }

    /// Real lanes in order, padded with non-lanes to `n` entries.
    pub fn padded_to(&self, n: usize) -> Result<Self> {
        Self::padded(self.lanes().cloned().collect(), n)
    }

    pub fn items(&self) -> &[GroundTruthItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn lanes(&self) -> impl Iterator<Item = &GtLane> + '_ {
        self.items.iter().filter_map(GroundTruthItem::lane)
    }

    pub fn lane_count(&self) -> usize {
        self.lanes().count()
    }

    /// Entries reordered so that new position `i` holds old entry `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        GroundTruthSet {
            items: order.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl LossWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        if [w1, w2, w3].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got ({w1}, {w2}, {w3})"
            )));
        }
        Ok(LossWeights { w1, w2, w3 })
    }

    pub fn zero() -> Self {
        LossWeights {
            w1: 0.0,
            w2: 0.0,
            w3: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 3.0,
            w2: 5.0,
            w3: 2.0,
        }
    }
}

/// What to do with ground-truth rows that coincide with a predicted pole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SingularRows {
    #[default]
    Reject,
    /// Shift the row by [`SINGULAR_ROW_SHIFT`] pixels; used during training.
    Perturb,
}

/// Mean absolute column error of `params` over the polyline rows and its
/// gradient with respect to `(k'', f'', m'', n', b'', b''')`.
pub fn curve_l1(
    params: &TiltedCurveParams,
    polyline: &LanePolyline,
    policy: SingularRows,
) -> Result<(f64, [f64; 6])> {
    let mut total = 0.0;
    let mut grad = [0.0; 6];
    for &(u, v) in polyline.points() {
        let v = if (v - params.fpp).abs() < SINGULAR_ROW_EPS {
            match policy {
                SingularRows::Reject => {
                    return Err(Error::Singularity {
                        row: v,
                        pole: params.fpp,
                    })
                }
                SingularRows::Perturb => v + SINGULAR_ROW_SHIFT,
            }
        } else {
            v
        };
        let err = params.eval(v)? - u;
        total += err.abs();
        let sign = sign(err);
        if sign != 0.0 {
            for (g, d) in grad.iter_mut().zip(params.column_gradient(v)) {
                *g += sign * d;
            }
        }
    }
    let r = polyline.len() as f64;
    grad.iter_mut().for_each(|g| *g /= r);
    Ok((total / r, grad))
}

/// Mean of the two boundary errors and its gradient with respect to the
/// predicted `(alpha, beta)`.
pub fn boundary_l1(params: &TiltedCurveParams, gt: &GtLane) -> (f64, [f64; 2]) {
    let da = params.alpha - gt.alpha;
    let db = params.beta - gt.beta;
    (
        0.5 * (da.abs() + db.abs()),
        [0.5 * sign(da), 0.5 * sign(db)],
    )
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Matching cost between one ground-truth entry and one prediction, using the
/// raw class probability.
pub fn matching_cost(pred: &Prediction, gt: &GroundTruthItem, w: &LossWeights) -> Result<f64> {
    matching_cost_with(pred, gt, w, SingularRows::Reject)
}

fn matching_cost_with(
    pred: &Prediction,
    gt: &GroundTruthItem,
    w: &LossWeights,
    policy: SingularRows,
) -> Result<f64> {
    let mut d = -w.w1 * pred.class_prob(gt.is_lane());
    if let GroundTruthItem::Lane(lane) = gt {
        d += w.w2 * curve_l1(&pred.params, &lane.polyline, policy)?.0;
        d += w.w3 * boundary_l1(&pred.params, lane).0;
    }
    Ok(d)
}

/// `cost[i][j]`: ground truth `i` against prediction `j`.
pub fn cost_matrix(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    w: &LossWeights,
    policy: SingularRows,
) -> Result<Vec<Vec<f64>>> {
    check_sizes(preds, gts)?;
    gts.items()
        .iter()
        .map(|gt| {
            preds
                .items()
                .iter()
                .map(|p| matching_cost_with(p, gt, w, policy))
                .collect()
        })
        .collect()
}

fn check_sizes(preds: &PredictionSet, gts: &GroundTruthSet) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions against {} ground-truth entries",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Gradient of the loss with respect to one prediction slot.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PredictionGrad {
    /// With respect to `(p_non_lane, p_lane)`.
    pub probs: [f64; 2],
    /// With respect to the fields of [`TiltedCurveParams`] in declaration order.
    pub params: [f64; TILTED_PARAM_COUNT],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittingLoss {
    pub loss: f64,
    pub assignment: Assignment,
    /// One entry per prediction slot.
    pub grads: Vec<PredictionGrad>,
}

/// Matches `preds` to `gts` and evaluates the regression loss on the matched
/// pairs. The assignment is a constant of the evaluation; the returned
/// gradients hold it fixed.
pub fn hungarian_fitting_loss(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    w: &LossWeights,
) -> Result<FittingLoss> {
    hungarian_fitting_loss_with(preds, gts, w, SingularRows::Reject)
}

pub fn hungarian_fitting_loss_with(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    w: &LossWeights,
    policy: SingularRows,
) -> Result<FittingLoss> {
    let cost = cost_matrix(preds, gts, w, policy)?;
    let assignment = hungarian_solve(&cost)?;
    loss_for_assignment(preds, gts, w, &assignment, policy)
}

/// Regression loss for a given assignment.
pub fn loss_for_assignment(
    preds: &PredictionSet,
    gts: &GroundTruthSet,
    w: &LossWeights,
    assignment: &Assignment,
    policy: SingularRows,
) -> Result<FittingLoss> {
    check_sizes(preds, gts)?;
    if assignment.len() != gts.len() {
        return Err(Error::Shape(format!(
            "assignment of size {} for {} entries",
            assignment.len(),
            gts.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = vec![PredictionGrad::default(); preds.len()];
    for (i, gt) in gts.items().iter().enumerate() {
        let j = assignment.prediction_for(i);
        let pred = &preds.items()[j];
        let grad = &mut grads[j];

        let class = usize::from(gt.is_lane());
        let p = pred.probs[class];
        loss -= w.w1 * p.max(PROB_FLOOR).ln();
        if p > PROB_FLOOR {
            grad.probs[class] -= w.w1 / p;
        }

        if let GroundTruthItem::Lane(lane) = gt {
            let (curve, curve_grad) = curve_l1(&pred.params, &lane.polyline, policy)?;
            loss += w.w2 * curve;
            for (g, d) in grad.params.iter_mut().zip(curve_grad) {
                *g += w.w2 * d;
            }
            let (bound, bound_grad) = boundary_l1(&pred.params, lane);
            loss += w.w3 * bound;
            grad.params[6] += w.w3 * bound_grad[0];
            grad.params[7] += w.w3 * bound_grad[1];
        }
    }
    Ok(FittingLoss {
        loss,
        assignment: assignment.clone(),
        grads,
    })
}
