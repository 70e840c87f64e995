//! Procedural road scenes with exact lane parameters.
//!
//! Each scene draws a camera and one ground-plane shape `(k, m, n)` shared by
//! every lane, places 2 to 5 lane boundaries a lane width apart, projects them
//! into the tilted image and renders anti-aliased strokes on a noisy
//! background. Ground truth is sampled on a fixed grid of rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{Error, Result};
use crate::geometry::{
    project_ground_to_image, tilt_reparameterize, CameraModel, GroundCurve, LanePolyline,
    TiltedCurveParams,
};
use crate::matching::{GroundTruthSet, GtLane};

const MAX_ATTEMPTS: usize = 1000;
/// Ground-truth columns are rounded to multiples of `2^-32` px so that
/// reflections `u -> W - 1 - u` are exact.
const COLUMN_GRID: f64 = 4_294_967_296.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length as a fraction of the image width.
    pub focal_scale: (f64, f64),
    /// Camera pitch, radians. Negative looks down.
    pub pitch: (f64, f64),
    /// Camera height, meters.
    pub camera_height: (f64, f64),
    pub lanes: (usize, usize),
    pub lane_width: (f64, f64),
    /// Largest lateral camera offset as a fraction of the lane width.
    pub lateral_jitter: f64,
    /// Bounds on `|k|`, `|m|` and `|n|` of the ground cubic.
    pub max_k: f64,
    pub max_m: f64,
    pub max_n: f64,
    pub first_row: usize,
    pub row_step: usize,
    /// Pixels between the horizon and the first visible lane row.
    pub horizon_gap: (f64, f64),
    pub min_points: usize,
    pub stroke_width: (f64, f64),
    pub stroke_intensity: f64,
    pub stroke_jitter: f64,
    pub background: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            width: 256,
            height: 128,
            focal_scale: (0.7, 0.85),
            pitch: (-0.25, -0.1),
            camera_height: (1.3, 1.7),
            lanes: (2, 5),
            lane_width: (3.3, 3.9),
            lateral_jitter: 0.3,
            max_k: 3e-5,
            max_m: 3e-3,
            max_n: 0.05,
            first_row: 7,
            row_step: 8,
            horizon_gap: (4.0, 10.0),
            min_points: 4,
            stroke_width: (2.0, 4.0),
            stroke_intensity: 200.0,
            stroke_jitter: 30.0,
            background: (40.0, 90.0),
            noise_sigma: 10.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        let range = |name: &str, (lo, hi): (f64, f64)| -> Result<()> {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} range [{lo}, {hi}] is invalid")))
            }
        };
        range("focal_scale", self.focal_scale)?;
        range("pitch", self.pitch)?;
        range("camera_height", self.camera_height)?;
        range("lane_width", self.lane_width)?;
        range("horizon_gap", self.horizon_gap)?;
        range("stroke_width", self.stroke_width)?;
        range("background", self.background)?;
        if self.pitch.0 < -0.3 || self.pitch.1 > 0.3 {
            return err(format!(
                "pitch range [{}, {}] must lie within [-0.3, 0.3] rad",
                self.pitch.0, self.pitch.1
            ));
        }
        if self.lanes.0 < 2 || self.lanes.1 > 5 || self.lanes.0 > self.lanes.1 {
            return err(format!(
                "lane count range [{}, {}] must lie within [2, 5]",
                self.lanes.0, self.lanes.1
            ));
        }
        if self.width < 8 || self.height < 8 {
            return err(format!("image size {}x{} is too small", self.width, self.height));
        }
        if self.focal_scale.0 <= 0.0 || self.camera_height.0 <= 0.0 || self.lane_width.0 <= 0.0 {
            return err("focal_scale, camera_height and lane_width must be positive".into());
        }
        if self.stroke_width.0 <= 0.0 || self.horizon_gap.0 < 0.0 {
            return err("stroke_width must be positive and horizon_gap nonnegative".into());
        }
        for (name, v) in [
            ("max_k", self.max_k),
            ("max_m", self.max_m),
            ("max_n", self.max_n),
            ("lateral_jitter", self.lateral_jitter),
            ("stroke_jitter", self.stroke_jitter),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.row_step == 0 || self.min_points < 2 {
            return err("row_step must be positive and min_points at least 2".into());
        }
        Ok(())
    }

    /// Rows at which ground truth is sampled.
    pub fn sample_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (self.first_row..self.height).step_by(self.row_step)
    }
}

/// Ground-plane shape shared by the lanes of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundShape {
    pub k: f64,
    pub m: f64,
    pub n: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub index: usize,
    pub seed: u64,
    pub camera: CameraModel,
    /// Principal point in pixels.
    pub center: (f64, f64),
    pub shared_shape: GroundShape,
    /// Ground offset `b` of each kept lane, left to right.
    pub lane_offsets: Vec<f64>,
    /// Exact curve of each lane in image pixel coordinates.
    pub params: Vec<TiltedCurveParams>,
    pub image: GrayImage,
    /// Unpadded ground truth, one entry per lane.
    pub gts: GroundTruthSet,
}

impl SyntheticScene {
    pub fn lanes(&self) -> Vec<GtLane> {
        self.gts.lanes().cloned().collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    uniform(rng, (-max, max))
}

fn quantize(u: f64) -> f64 {
    (u * COLUMN_GRID).round() / COLUMN_GRID
}

pub fn synth_generate(seed: u64, n_scenes: usize, cfg: &GenConfig) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    (0..n_scenes).map(|i| synth_scene(seed, i, cfg)).collect()
}

/// Scene `index` of the sequence for `seed`. Each scene has its own generator
/// stream, so scenes can be produced independently.
pub fn synth_scene(seed: u64, index: usize, cfg: &GenConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(scene) = try_scene(&mut rng, seed, index, cfg)? {
            return Ok(scene);
        }
    }
    Err(Error::Config(format!(
        "no scene with at least two visible lanes after {MAX_ATTEMPTS} attempts"
    )))
}

fn try_scene(
    rng: &mut ChaCha8Rng,
    seed: u64,
    index: usize,
    cfg: &GenConfig,
) -> Result<Option<SyntheticScene>> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let focal = uniform(rng, cfg.focal_scale) * w;
    let camera = CameraModel::square_pixels(
        focal,
        uniform(rng, cfg.pitch),
        uniform(rng, cfg.camera_height),
    )?;
    let shape = GroundShape {
        k: symmetric(rng, cfg.max_k),
        m: symmetric(rng, cfg.max_m),
        n: symmetric(rng, cfg.max_n),
    };
    let count = rng.random_range(cfg.lanes.0..=cfg.lanes.1);
    let start = rng.random_range(-(count as i64)..=0);
    let lane_width = uniform(rng, cfg.lane_width);
    let shift = symmetric(rng, cfg.lateral_jitter) * lane_width;
    let gap = uniform(rng, cfg.horizon_gap);
    let center = (w / 2.0, h / 2.0);
    let first_visible = center.1 + camera.horizon_row() + gap;

    let mut offsets = Vec::new();
    let mut params = Vec::new();
    let mut lanes = Vec::new();
    for j in start..start + count as i64 {
        let b = (j as f64 + 0.5) * lane_width + shift;
        let ground = GroundCurve {
            k: shape.k,
            m: shape.m,
            n: shape.n,
            b,
        };
        let image = project_ground_to_image(&ground, &camera);
        let g = tilt_reparameterize(&image, &camera, 0.0, 1.0)?.shifted(center.0, center.1);
        let Some(points) = visible_run(&g, cfg, first_visible) else {
            continue;
        };
        let polyline = LanePolyline::new(points)?;
        let mut g = g;
        g.alpha = polyline.first_row() / h;
        g.beta = polyline.last_row() / h;
        offsets.push(b);
        params.push(g);
        lanes.push(GtLane::from_polyline(polyline, h));
    }
    if lanes.len() < 2 {
        return Ok(None);
    }

    let image = render(rng, cfg, &params, first_visible);
    Ok(Some(SyntheticScene {
        index,
        seed,
        camera,
        center,
        shared_shape: shape,
        lane_offsets: offsets,
        params,
        image,
        gts: GroundTruthSet::from_lanes(lanes),
    }))
}

/// Longest run of consecutive sample rows on which the lane is inside the
/// image, if it has at least `min_points` rows.
fn visible_run(g: &TiltedCurveParams, cfg: &GenConfig, first_visible: f64) -> Option<Vec<(f64, f64)>> {
    let max_u = cfg.width as f64 - 1.0;
    let mut best: Vec<(f64, f64)> = Vec::new();
    let mut run = Vec::new();
    for r in cfg.sample_rows() {
        let v = r as f64;
        let u = if v >= first_visible { g.eval(v).ok() } else { None };
        match u.map(quantize) {
            Some(u) if (0.0..=max_u).contains(&u) => run.push((u, v)),
            _ => {
                if run.len() > best.len() {
                    best = std::mem::take(&mut run);
                }
                run.clear();
            }
        }
    }
    if run.len() > best.len() {
        best = run;
    }
    (best.len() >= cfg.min_points).then_some(best)
}

/// Column slope `du/dv` of a tilted curve.
fn slope(g: &TiltedCurveParams, v: f64) -> f64 {
    let inv = 1.0 / (v - g.fpp);
    -2.0 * g.kpp * inv * inv * inv - g.mpp * inv * inv + g.bpp
}

fn render(rng: &mut ChaCha8Rng, cfg: &GenConfig, lanes: &[TiltedCurveParams], first_visible: f64) -> GrayImage {
    let (w, h) = (cfg.width, cfg.height);
    let background = uniform(rng, cfg.background);
    let mut buf = vec![background; w * h];
    let first_row = first_visible.ceil().max(0.0) as usize;
    for g in lanes {
        let width = uniform(rng, cfg.stroke_width);
        let intensity = cfg.stroke_intensity + symmetric(rng, cfg.stroke_jitter);
        for y in first_row..h {
            let v = y as f64;
            let Ok(u) = g.eval(v) else { continue };
            let half = 0.5 * width * (1.0 + slope(g, v).powi(2)).sqrt();
            let lo = (u - half - 1.0).floor().max(0.0);
            let hi = (u + half + 1.0).ceil().min(w as f64 - 1.0);
            if !(lo <= hi) {
                continue;
            }
            for x in lo as usize..=hi as usize {
                let coverage = (half + 0.5 - (x as f64 - u).abs()).clamp(0.0, 1.0);
                let px = &mut buf[y * w + x];
                *px += coverage * (intensity - *px);
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
    let pixels = buf
        .into_iter()
        .map(|v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::new(w, h, pixels).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fit_tilted_curve, sample_lane, FitOptions};

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        let a = synth_generate(7, 4, &cfg).unwrap();
        let b = synth_generate(7, 4, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(8, 4, &cfg).unwrap();
        assert_ne!(a[0].image, c[0].image);
        // scenes are independent of how many are requested
        assert_eq!(synth_scene(7, 3, &cfg).unwrap(), a[3]);
    }

    #[test]
    fn stored_params_reproduce_polylines() {
        let cfg = GenConfig::default();
        for scene in synth_generate(11, 20, &cfg).unwrap() {
            assert!((2..=5).contains(&scene.gts.lane_count()));
            for (g, lane) in scene.params.iter().zip(scene.gts.lanes()) {
                let resampled = sample_lane(g, cfg.height as f64, lane.polyline.len()).unwrap();
                for (p, q) in resampled.points().iter().zip(lane.polyline.points()) {
                    assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
                }
                // lanes lie on bright strokes
                for &(u, v) in lane.polyline.points() {
                    let px = scene.image.get(u.round() as usize, v as usize);
                    assert!(px > 100, "dark pixel {px} at ({u}, {v})");
                }
            }
        }
    }

    #[test]
    fn zero_curvature_gives_straight_fits() {
        let cfg = GenConfig {
            max_k: 0.0,
            max_m: 0.0,
            ..GenConfig::default()
        };
        for scene in synth_generate(3, 5, &cfg).unwrap() {
            let lanes: Vec<_> = scene.gts.lanes().map(|l| l.polyline.clone()).collect();
            let opts = FitOptions::new(cfg.height as f64).shared(true);
            let fit = fit_tilted_curve(&lanes, &opts).unwrap();
            let shape = fit.shared.unwrap();
            assert!(shape.kpp.abs() < 1e-3 && shape.mpp.abs() < 1e-3, "{shape:?}");
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let bad_pitch = GenConfig {
            pitch: (-0.5, 0.0),
            ..GenConfig::default()
        };
        assert!(synth_generate(0, 1, &bad_pitch).is_err());
        let bad_lanes = GenConfig {
            lanes: (1, 3),
            ..GenConfig::default()
        };
        assert!(bad_lanes.validate().is_err());
    }
}
