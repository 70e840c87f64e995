use serde::{Deserialize, Serialize};

use crate::geometry::{TiltedCurveParams, TILTED_PARAM_COUNT};

/// Number of curve parameters handled by the codec; `alpha`/`beta` pass through.
const CODED: usize = 6;
const MIN_STD: f64 = 1e-6;

/// Maps raw network outputs to pixel-space curve parameters.
///
/// Curves are normalized to columns `u / W` and rows `v / H`; each of
/// `(k'', f'', m'', n', b'', b''')` is then standardized with a mean and
/// deviation taken from training labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputCodec {
    pub width: f64,
    pub height: f64,
    pub mean: [f64; CODED],
    pub std: [f64; CODED],
}

impl OutputCodec {
    pub fn identity(width: f64, height: f64) -> Self {
        OutputCodec {
            width,
            height,
            mean: [0.0; CODED],
            std: [1.0; CODED],
        }
    }

    /// Pixel units per normalized unit for each coded parameter.
    fn pixel_scale(&self) -> [f64; CODED] {
        let (w, h) = (self.width, self.height);
        [w * h * h, h, w * h, w, w / h, w]
    }

    pub fn normalize(&self, g: &TiltedCurveParams) -> [f64; CODED] {
        let a = g.to_array();
        let s = self.pixel_scale();
        std::array::from_fn(|i| a[i] / s[i])
    }

    /// Standardization statistics of `labels` in normalized units.
    pub fn fit(width: f64, height: f64, labels: &[TiltedCurveParams]) -> Self {
        let mut codec = Self::identity(width, height);
        if labels.is_empty() {
            return codec;
        }
        let norm: Vec<[f64; CODED]> = labels.iter().map(|g| codec.normalize(g)).collect();
        let n = norm.len() as f64;
        for i in 0..CODED {
            let mean = norm.iter().map(|v| v[i]).sum::<f64>() / n;
            let var = norm.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / n;
            codec.mean[i] = mean;
            codec.std[i] = var.sqrt().max(MIN_STD);
        }
        codec
    }

    /// Per-column `(scale, offset)` taking raw outputs to pixel parameters.
    pub fn affine(&self) -> ([f64; TILTED_PARAM_COUNT], [f64; TILTED_PARAM_COUNT]) {
        let s = self.pixel_scale();
        let mut scale = [1.0; TILTED_PARAM_COUNT];
        let mut offset = [0.0; TILTED_PARAM_COUNT];
        for i in 0..CODED {
            scale[i] = s[i] * self.std[i];
            offset[i] = s[i] * self.mean[i];
        }
        (scale, offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_labels_standardize() {
        let labels: Vec<_> = (0..5)
            .map(|i| {
                let t = i as f64;
                TiltedCurveParams::from_array([100.0 * t, 20.0 + t, 5.0 - t, 120.0, 0.5 * t, 10.0, 0.3, 0.9])
            })
            .collect();
        let codec = OutputCodec::fit(256.0, 128.0, &labels);
        let (scale, offset) = codec.affine();
        // raw value 0 maps to the label mean
        assert!((offset[1] - 22.0).abs() < 1e-12);
        assert!((offset[3] - 120.0).abs() < 1e-9);
        assert_eq!(scale[6], 1.0);
        assert!(codec.std[3] >= MIN_STD);
        for i in 0..6 {
            assert!(scale[i] > 0.0);
        }
    }
}
