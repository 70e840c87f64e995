//! Fixtures shared by the benchmarks.

use lanetr_core::data::{synth_generate, GenConfig, Sample};
use lanetr_core::geometry::LanePolyline;
use lanetr_core::matching::{GroundTruthSet, Prediction, PredictionSet};
use lanetr_core::model::ModelConfig;
use lanetr_core::TiltedCurveParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small model used for step timings.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        queries: 3,
        backbone_channels: vec![4, 8, 16],
        input_h: 32,
        input_w: 64,
        ..ModelConfig::default()
    }
}

/// Uniform `n x n` cost matrix.
pub fn random_costs(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(0.0..100.0)).collect())
        .collect()
}

/// Synthetic desk scenes.
pub fn desk_samples(seed: u64, n: usize) -> Vec<Sample> {
    synth_generate(seed, n, &GenConfig::default())
        .expect("default generator config is valid")
        .iter()
        .map(Sample::from)
        .collect()
}

/// Ground-truth polylines of one scene.
pub fn scene_lanes(sample: &Sample) -> Vec<LanePolyline> {
    sample.gts.lanes().map(|l| l.polyline.clone()).collect()
}

/// Predictions for `gts` with each true parameter perturbed, padded with
/// non-lane slots up to `n`.
pub fn noisy_predictions(params: &[TiltedCurveParams], n: usize, seed: u64) -> PredictionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<Prediction> = params
        .iter()
        .map(|p| {
            let mut a = p.to_array();
            for v in &mut a[..6] {
                *v *= 1.0 + rng.random_range(-0.05..0.05);
            }
            Prediction {
                probs: [0.2, 0.8],
                params: TiltedCurveParams::from_array(a),
            }
        })
        .collect();
    while items.len() < n {
        let base = params.first().copied().unwrap_or_else(|| TiltedCurveParams::from_array([0.0; 8]));
        items.push(Prediction {
            probs: [0.9, 0.1],
            params: base,
        });
    }
    PredictionSet::new(items).expect("valid probabilities")
}

/// `gts` padded to `n` slots.
pub fn padded(gts: &GroundTruthSet, n: usize) -> GroundTruthSet {
    gts.padded_to(n).expect("scene has at most n lanes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_consistent() {
        let s = desk_samples(1, 1);
        let preds = noisy_predictions(&s[0].params, 7, 2);
        assert_eq!(preds.len(), 7);
        assert_eq!(padded(&s[0].gts, 7).items().len(), 7);
        assert_eq!(random_costs(5, 3).len(), 5);
        assert!(tiny_model_config().validate().is_ok());
    }
}
