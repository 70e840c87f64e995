//! Lane shape model.
//!
//! A lane on flat ground is the cubic `X = k Z^3 + m Z^2 + n Z + b`. Under a
//! pinhole camera with focal ratios `fu`, `fv` at height `H` it projects to the
//! untilted image curve
//!
//! ```text
//! u = k'/v^2 + m'/v + n' + b' v
//! ```
//!
//! and a camera pitched by `phi` sees it as
//!
//! ```text
//! u' = k''/(v' - f'')^2 + m''/(v' - f'') + n' + b'' v' - b'''
//! ```
//!
//! with `k'' = k' cos^2(phi)`, `f'' = f sin(phi)`, `m'' = m' cos(phi)`,
//! `b'' = b' / cos(phi)` and `b''' = b' f tan(phi)`. The last mapping is
//! obtained by substituting `v = (v' - f sin(phi)) / cos(phi)` into the
//! untilted curve; `b''' = b'' f''` holds for every physically generated lane.
//!
//! All coordinates are pixels. Rows are measured from the principal point in
//! the camera frame; [`TiltedCurveParams::shifted`] moves a curve into an image
//! frame whose origin is the top-left pixel.

mod fit;

pub use fit::{fit_tilted_curve, FitOptions, FitResult, ShapeParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows closer than this to the pole `f''` are treated as singular.
pub const POLE_EPS: f64 = 1e-9;

/// Pinhole camera with a pitch angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Focal length in pixels.
    pub focal_px: f64,
    /// Pitch angle of the optical axis against the ground, radians.
    pub pitch: f64,
    /// Camera height above the ground, meters.
    pub height: f64,
    /// Pixel width on the focal plane divided by the focal length.
    pub fu: f64,
    /// Pixel height on the focal plane divided by the focal length.
    pub fv: f64,
}

impl CameraModel {
    pub fn new(focal_px: f64, pitch: f64, height: f64, fu: f64, fv: f64) -> Result<Self> {
        let cam = CameraModel {
            focal_px,
            pitch,
            height,
            fu,
            fv,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square pixels with `fu = fv = 1 / focal_px`.
    pub fn square_pixels(focal_px: f64, pitch: f64, height: f64) -> Result<Self> {
        Self::new(focal_px, pitch, height, 1.0 / focal_px, 1.0 / focal_px)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("focal_px", self.focal_px),
            ("height", self.height),
            ("fu", self.fu),
            ("fv", self.fv),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidCamera(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.pitch.is_finite() && self.pitch.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidCamera(format!(
                "|pitch| must be below pi/2, got {}",
                self.pitch
            )));
        }
        Ok(())
    }

    /// Row of the horizon (the pole `f''`) in the tilted camera frame.
    pub fn horizon_row(&self) -> f64 {
        self.focal_px * self.pitch.sin()
    }
}

/// Ground-plane cubic `X = k Z^3 + m Z^2 + n Z + b`. `k = 0` is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundCurve {
    pub k: f64,
    pub m: f64,
    pub n: f64,
    pub b: f64,
}

impl GroundCurve {
    pub fn lateral(&self, z: f64) -> f64 {
        ((self.k * z + self.m) * z + self.n) * z + self.b
    }
}

/// Coefficients of the untilted image curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageCurveParams {
    pub kp: f64,
    pub mp: f64,
    pub np: f64,
    pub bp: f64,
}

/// One lane in the tilted image plane, plus its normalized vertical extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedCurveParams {
    pub kpp: f64,
    pub fpp: f64,
    pub mpp: f64,
    pub np: f64,
    pub bpp: f64,
    pub bppp: f64,
    /// Upper end of the lane (smaller row), as a fraction of image height.
    pub alpha: f64,
    /// Lower end of the lane (larger row), as a fraction of image height.
    pub beta: f64,
}

/// Number of scalar parameters in [`TiltedCurveParams`].
pub const TILTED_PARAM_COUNT: usize = 8;

impl TiltedCurveParams {
    pub fn to_array(&self) -> [f64; TILTED_PARAM_COUNT] {
        [
            self.kpp, self.fpp, self.mpp, self.np, self.bpp, self.bppp, self.alpha, self.beta,
        ]
    }

    pub fn from_array(a: [f64; TILTED_PARAM_COUNT]) -> Self {
        TiltedCurveParams {
            kpp: a[0],
            fpp: a[1],
            mpp: a[2],
            np: a[3],
            bpp: a[4],
            bppp: a[5],
            alpha: a[6],
            beta: a[7],
        }
    }

    /// Column at row `v`, or a singularity error at the pole.
    pub fn eval(&self, v: f64) -> Result<f64> {
        let w = v - self.fpp;
        if w.abs() < POLE_EPS {
            return Err(Error::Singularity {
                row: v,
                pole: self.fpp,
            });
        }
        Ok(self.eval_offset(v, w))
    }

    #[inline]
    fn eval_offset(&self, v: f64, w: f64) -> f64 {
        let inv = 1.0 / w;
        (self.kpp * inv + self.mpp) * inv + self.np + self.bpp * v - self.bppp
    }

    /// Partial derivatives of the column at row `v` with respect to
    /// `(k'', f'', m'', n', b'', b''')`.
    pub fn column_gradient(&self, v: f64) -> [f64; 6] {
        let inv = 1.0 / (v - self.fpp);
        let inv2 = inv * inv;
        [
            inv2,
            2.0 * self.kpp * inv2 * inv + self.mpp * inv2,
            inv,
            1.0,
            v,
            -1.0,
        ]
    }

    /// Moves the curve into a frame whose origin sits at `(-cx, -cy)` in the
    /// current frame, i.e. `u_new = u + cx` at `v_new = v + cy`.
    pub fn shifted(&self, cx: f64, cy: f64) -> Self {
        TiltedCurveParams {
            fpp: self.fpp + cy,
            np: self.np + cx,
            bppp: self.bppp + self.bpp * cy,
            ..*self
        }
    }

    /// Rescales pixel axes: `u_new = sx u` at `v_new = sy v`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        TiltedCurveParams {
            kpp: self.kpp * sx * sy * sy,
            fpp: self.fpp * sy,
            mpp: self.mpp * sx * sy,
            np: self.np * sx,
            bpp: self.bpp * sx / sy,
            bppp: self.bppp * sx,
            ..*self
        }
    }

    /// Mirrors the curve about the vertical axis `u = axis / 2`, i.e.
    /// `u_new = axis - u`.
    pub fn mirrored(&self, axis: f64) -> Self {
        TiltedCurveParams {
            kpp: -self.kpp,
            mpp: -self.mpp,
            np: axis - self.np,
            bpp: -self.bpp,
            bppp: -self.bppp,
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Ordered lane points `(u', v')` with strictly increasing rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    points: Vec<(f64, f64)>,
}

impl LanePolyline {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidPolyline(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|(u, v)| !u.is_finite() || !v.is_finite()) {
            return Err(Error::InvalidPolyline("non-finite coordinate".into()));
        }
        if points.windows(2).any(|w| w[1].1 <= w[0].1) {
            return Err(Error::InvalidPolyline("rows must strictly increase".into()));
        }
        Ok(LanePolyline { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.1)
    }

    pub fn first_row(&self) -> f64 {
        self.points[0].1
    }

    pub fn last_row(&self) -> f64 {
        self.points[self.points.len() - 1].1
    }

    pub fn into_points(self) -> Vec<(f64, f64)> {
        self.points
    }
}

/// Coefficients of the untilted image curve for a ground cubic.
pub fn project_ground_to_image(curve: &GroundCurve, cam: &CameraModel) -> ImageCurveParams {
    let h = cam.height;
    ImageCurveParams {
        kp: curve.k * h * h / (cam.fu * cam.fv * cam.fv),
        mp: curve.m * h / (cam.fu * cam.fv),
        np: curve.n / cam.fu,
        bp: curve.b * cam.fv / (cam.fu * h),
    }
}

/// Column of the untilted image curve at row `v`.
pub fn eval_image_curve(p: &ImageCurveParams, v: f64) -> Result<f64> {
    if v == 0.0 {
        return Err(Error::Domain("untilted image curve is undefined at v = 0".into()));
    }
    let inv = 1.0 / v;
    Ok((p.kp * inv + p.mp) * inv + p.np + p.bp * v)
}

/// Folds the camera pitch into the curve coefficients.
pub fn tilt_reparameterize(
    p: &ImageCurveParams,
    cam: &CameraModel,
    alpha: f64,
    beta: f64,
) -> Result<TiltedCurveParams> {
    cam.validate()?;
    if !(alpha < beta) {
        return Err(Error::Domain(format!("alpha ({alpha}) must be below beta ({beta})")));
    }
    let (sin, cos) = cam.pitch.sin_cos();
    let f = cam.focal_px;
    Ok(TiltedCurveParams {
        kpp: p.kp * cos * cos,
        fpp: f * sin,
        mpp: p.mp * cos,
        np: p.np,
        bpp: p.bp / cos,
        bppp: p.bp * f * (sin / cos),
        alpha,
        beta,
    })
}

/// Column of the tilted curve at row `v_prime`.
pub fn eval_tilted_curve(g: &TiltedCurveParams, v_prime: f64) -> Result<f64> {
    g.eval(v_prime)
}

/// Row in the untilted frame for a row of the tilted frame.
pub fn untilt_pixel(v_prime: f64, cam: &CameraModel) -> f64 {
    let (sin, cos) = cam.pitch.sin_cos();
    (v_prime - cam.focal_px * sin) / cos
}

/// Row in the tilted frame for a row of the untilted frame.
pub fn tilt_pixel(v: f64, cam: &CameraModel) -> f64 {
    let (sin, cos) = cam.pitch.sin_cos();
    cam.focal_px * sin + v * cos
}

/// Samples `n_samples` rows uniformly between `alpha * image_h` and
/// `beta * image_h` (inclusive).
pub fn sample_lane(g: &TiltedCurveParams, image_h: f64, n_samples: usize) -> Result<LanePolyline> {
    if !(g.alpha < g.beta) {
        return Err(Error::Domain(format!(
            "alpha ({}) must be below beta ({})",
            g.alpha, g.beta
        )));
    }
    if n_samples < 2 {
        return Err(Error::Domain("need at least 2 samples".into()));
    }
    let top = g.alpha * image_h;
    let bottom = g.beta * image_h;
    let step = (bottom - top) / (n_samples - 1) as f64;
    let points = (0..n_samples)
        .map(|i| {
            let v = if i + 1 == n_samples {
                bottom
            } else {
                top + step * i as f64
            };
            g.eval(v).map(|u| (u, v))
        })
        .collect::<Result<Vec<_>>>()?;
    LanePolyline::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cam(f: f64, pitch: f64, h: f64, fu: f64, fv: f64) -> CameraModel {
        CameraModel::new(f, pitch, h, fu, fv).unwrap()
    }

    #[test]
    fn camera_rejects_bad_values() {
        assert!(CameraModel::new(0.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(CameraModel::new(1.0, 0.0, -1.0, 1.0, 1.0).is_err());
        assert!(CameraModel::new(1.0, PI / 2.0, 1.0, 1.0, 1.0).is_err());
        assert!(CameraModel::new(1.0, 0.1, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn identity_ratio_camera_keeps_coefficients() {
        let curve = GroundCurve {
            k: 0.3,
            m: -1.2,
            n: 2.5,
            b: 0.7,
        };
        let p = project_ground_to_image(&curve, &cam(10.0, 0.0, 1.0, 1.0, 1.0));
        assert_eq!(
            p,
            ImageCurveParams {
                kp: 0.3,
                mp: -1.2,
                np: 2.5,
                bp: 0.7
            }
        );
    }

    #[test]
    fn projection_hand_value() {
        let curve = GroundCurve {
            k: 2.0,
            m: 0.0,
            n: 0.0,
            b: 0.0,
        };
        let p = project_ground_to_image(&curve, &cam(10.0, 0.0, 2.0, 1.0, 2.0));
        assert_eq!(p.kp, 2.0);
        assert_eq!((p.mp, p.np, p.bp), (0.0, 0.0, 0.0));
    }

    #[test]
    fn image_curve_hand_values() {
        let p = |kp, mp, np, bp| ImageCurveParams { kp, mp, np, bp };
        assert_eq!(eval_image_curve(&p(0.0, 0.0, 3.0, 2.0), 1.0).unwrap(), 5.0);
        assert_eq!(eval_image_curve(&p(1.0, 1.0, 0.0, 0.0), 1.0).unwrap(), 2.0);
        assert_eq!(eval_image_curve(&p(4.0, 0.0, 0.0, 0.0), 2.0).unwrap(), 1.0);
        assert!(matches!(
            eval_image_curve(&p(1.0, 0.0, 0.0, 0.0), 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_pitch_tilt_is_identity() {
        let p = ImageCurveParams {
            kp: 3.0,
            mp: -2.0,
            np: 1.5,
            bp: 0.25,
        };
        let g = tilt_reparameterize(&p, &cam(100.0, 0.0, 1.5, 0.01, 0.01), 0.2, 0.9).unwrap();
        assert_eq!((g.kpp, g.fpp, g.mpp, g.np, g.bpp, g.bppp), (3.0, 0.0, -2.0, 1.5, 0.25, 0.0));
        assert_eq!((g.alpha, g.beta), (0.2, 0.9));
    }

    #[test]
    fn tilt_hand_value_for_pole() {
        let p = ImageCurveParams {
            kp: 1.0,
            mp: 1.0,
            np: 1.0,
            bp: 1.0,
        };
        let g = tilt_reparameterize(&p, &cam(100.0, PI / 6.0, 1.0, 1.0, 1.0), 0.0, 1.0).unwrap();
        assert!((g.fpp - 50.0).abs() < 1e-12);
    }

    #[test]
    fn tilt_rejects_inverted_bounds() {
        let p = ImageCurveParams {
            kp: 1.0,
            mp: 1.0,
            np: 1.0,
            bp: 1.0,
        };
        assert!(tilt_reparameterize(&p, &cam(100.0, 0.1, 1.0, 1.0, 1.0), 0.5, 0.5).is_err());
    }

    #[test]
    fn tilted_curve_hand_values() {
        let g = TiltedCurveParams {
            kpp: 1.0,
            fpp: 0.0,
            mpp: 0.0,
            np: 0.0,
            bpp: 0.0,
            bppp: 0.0,
            alpha: 0.0,
            beta: 1.0,
        };
        assert_eq!(eval_tilted_curve(&g, 2.0).unwrap(), 0.25);
        let g2 = TiltedCurveParams {
            kpp: 0.0,
            np: 1.0,
            bpp: 1.0,
            bppp: 1.0,
            ..g
        };
        assert_eq!(eval_tilted_curve(&g2, 3.0).unwrap(), 3.0);
        assert!(matches!(
            eval_tilted_curve(&g, 0.0),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn untilt_hand_values() {
        let c = cam(100.0, PI / 6.0, 1.0, 1.0, 1.0);
        assert!(untilt_pixel(50.0, &c).abs() < 1e-12);
        let flat = cam(100.0, 0.0, 1.0, 1.0, 1.0);
        assert_eq!(untilt_pixel(37.5, &flat), 37.5);
        for v in [-40.0, -1.0, 0.0, 3.5, 120.0] {
            let back = untilt_pixel(tilt_pixel(v, &c), &c);
            assert!((back - v).abs() < 1e-12, "{v} -> {back}");
        }
    }

    #[test]
    fn straight_lane_samples_are_collinear() {
        let g = TiltedCurveParams {
            kpp: 0.0,
            fpp: -10.0,
            mpp: 0.0,
            np: 4.0,
            bpp: 0.5,
            bppp: 1.0,
            alpha: 0.25,
            beta: 0.75,
        };
        let lane = sample_lane(&g, 100.0, 5).unwrap();
        assert_eq!(lane.len(), 5);
        let pts = lane.points();
        for p in pts {
            assert!((p.0 - (3.0 + 0.5 * p.1)).abs() < 1e-12);
        }
        assert_eq!(pts[0].1, 25.0);
        assert_eq!(pts[4].1, 75.0);
    }

    #[test]
    fn sample_lane_hits_pole() {
        let g = TiltedCurveParams {
            kpp: 1.0,
            fpp: 50.0,
            mpp: 0.0,
            np: 0.0,
            bpp: 0.0,
            bppp: 0.0,
            alpha: 0.0,
            beta: 1.0,
        };
        assert!(matches!(
            sample_lane(&g, 100.0, 3),
            Err(Error::Singularity { .. })
        ));
    }

    #[test]
    fn polyline_validation() {
        assert!(LanePolyline::new(vec![(0.0, 1.0)]).is_err());
        assert!(LanePolyline::new(vec![(0.0, 1.0), (0.0, 1.0)]).is_err());
        assert!(LanePolyline::new(vec![(0.0, 1.0), (0.0, 2.0)]).is_ok());
    }

    #[test]
    fn frame_changes_match_pointwise() {
        let g = TiltedCurveParams {
            kpp: 40.0,
            fpp: -12.0,
            mpp: 3.0,
            np: 7.0,
            bpp: 0.8,
            bppp: -9.6,
            alpha: 0.3,
            beta: 0.9,
        };
        for v in [5.0, 20.0, 77.0] {
            let u = g.eval(v).unwrap();
            let s = g.shifted(128.0, 64.0);
            assert!((s.eval(v + 64.0).unwrap() - (u + 128.0)).abs() < 1e-9);
            let sc = g.scaled(2.0, 0.5);
            assert!((sc.eval(v * 0.5).unwrap() - 2.0 * u).abs() < 1e-9);
            let m = g.mirrored(255.0);
            assert!((m.eval(v).unwrap() - (255.0 - u)).abs() < 1e-9);
        }
    }

    #[test]
    fn column_gradient_matches_differences() {
        let g = TiltedCurveParams {
            kpp: 40.0,
            fpp: -12.0,
            mpp: 3.0,
            np: 7.0,
            bpp: 0.8,
            bppp: -9.6,
            alpha: 0.3,
            beta: 0.9,
        };
        let v = 14.0;
        let grad = g.column_gradient(v);
        for (i, analytic) in grad.iter().enumerate() {
            let h = 1e-6;
            let mut a = g.to_array();
            a[i] += h;
            let up = TiltedCurveParams::from_array(a).eval(v).unwrap();
            a[i] -= 2.0 * h;
            let down = TiltedCurveParams::from_array(a).eval(v).unwrap();
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - analytic).abs() < 1e-6 * (1.0 + analytic.abs()));
        }
    }


    fn tilted() -> impl proptest::strategy::Strategy<Value = TiltedCurveParams> {
        use proptest::prelude::*;
        (-500.0..500.0f64, -60.0..20.0f64, -300.0..300.0f64, 0.0..256.0f64, -4.0..4.0f64, -200.0..200.0f64).prop_map(
            |(kpp, fpp, mpp, np, bpp, bppp)| TiltedCurveParams {
                kpp,
                fpp,
                mpp,
                np,
                bpp,
                bppp,
                alpha: 0.3,
                beta: 0.9,
            },
        )
    }

    proptest::proptest! {
        #[test]
        fn tilt_and_untilt_are_inverse(v in -400.0..400.0f64, f in 100.0..1500.0f64, pitch in -0.4..0.4f64) {
            let c = cam(f, pitch, 1.5, 1.0 / f, 1.0 / f);
            let back = tilt_pixel(untilt_pixel(v, &c), &c);
            proptest::prop_assert!((back - v).abs() <= 1e-12 * (1.0 + v.abs() + f));
        }

        #[test]
        fn tilted_curve_is_image_curve_at_untilted_row(
            kp in -2000.0..2000.0f64,
            mp in -300.0..300.0f64,
            np in -200.0..200.0f64,
            bp in -6.0..6.0f64,
            f in 100.0..1500.0f64,
            pitch in -0.4..0.4f64,
            v in 1.0..400.0f64,
        ) {
            let c = cam(f, pitch, 1.5, 1.0 / f, 1.0 / f);
            let p = ImageCurveParams { kp, mp, np, bp };
            let g = tilt_reparameterize(&p, &c, 0.1, 0.9).unwrap();
            let v_prime = tilt_pixel(v, &c);
            let want = eval_image_curve(&p, v).unwrap();
            let got = g.eval(v_prime).unwrap();
            proptest::prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {}", got, want);
        }

        #[test]
        fn frame_changes_hold_pointwise(
            g in tilted(),
            v in 25.0..128.0f64,
            cx in -50.0..50.0f64,
            cy in -50.0..50.0f64,
            sx in 0.25..4.0f64,
            sy in 0.25..4.0f64,
        ) {
            let u = g.eval(v).unwrap();
            let tol = 1e-9 * (1.0 + u.abs());
            let shifted = g.shifted(cx, cy).eval(v + cy).unwrap();
            proptest::prop_assert!((shifted - (u + cx)).abs() <= tol);
            let scaled = g.scaled(sx, sy).eval(v * sy).unwrap();
            proptest::prop_assert!((scaled - sx * u).abs() <= 4.0 * tol * sx);
            let mirrored = g.mirrored(255.0).eval(v).unwrap();
            proptest::prop_assert!((mirrored - (255.0 - u)).abs() <= tol);
        }
    }
}
