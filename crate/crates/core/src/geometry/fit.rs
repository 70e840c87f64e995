//! Least-squares fitting of tilted lane curves to polylines.
//!
//! With the pole `f''` fixed the curve is linear in the remaining
//! coefficients, so the fit is a one-dimensional search over `f''` wrapping a
//! linear solve. The search scans the bracket geometrically in distance to
//! the topmost observed row, narrows with golden-section and finishes with a
//! few Gauss-Newton steps on the full problem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LanePolyline, TiltedCurveParams};
use crate::error::{Error, Result};

const SCAN_SAMPLES: usize = 512;
const GOLDEN_MAX_ITERS: usize = 200;
const POLISH_ITERS: usize = 100;
const BACKTRACK_STEPS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Image height in pixels; normalizes `alpha`/`beta` and sets the default bracket.
    pub image_h: f64,
    /// Fit `k'', f'', m'', n'` jointly across all lanes.
    pub share_shape: bool,
    /// Fit the cubic term. When false `k''` is pinned to zero.
    pub cubic: bool,
    /// Search bracket for `f''`; defaults to `[-image_h, image_h]`.
    pub bracket: Option<(f64, f64)>,
    /// Golden-section tolerance on `f''`, pixels.
    pub tolerance: f64,
}

impl FitOptions {
    pub fn new(image_h: f64) -> Self {
        FitOptions {
            image_h,
            share_shape: false,
            cubic: true,
            bracket: None,
            tolerance: 1e-6,
        }
    }

    pub fn shared(mut self, share: bool) -> Self {
        self.share_shape = share;
        self
    }

    pub fn cubic(mut self, cubic: bool) -> Self {
        self.cubic = cubic;
        self
    }
}

/// Shape parameters common to every lane of an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kpp: f64,
    pub fpp: f64,
    pub mpp: f64,
    pub np: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub lanes: Vec<TiltedCurveParams>,
    /// Present when the fit shared the shape across lanes.
    pub shared: Option<ShapeParams>,
    /// Root-mean-square column residual over all points, pixels.
    pub rms_residual: f64,
    pub lane_rms: Vec<f64>,
}

pub fn fit_tilted_curve(lanes: &[LanePolyline], opts: &FitOptions) -> Result<FitResult> {
    if !(opts.image_h > 0.0) {
        return Err(Error::Domain("image height must be positive".into()));
    }
    if lanes.is_empty() {
        return Ok(FitResult {
            lanes: Vec::new(),
            shared: None,
            rms_residual: 0.0,
            lane_rms: Vec::new(),
        });
    }

    if opts.share_shape {
        let group = GroupFit::solve(lanes, opts)?;
        let params = group.params(lanes, opts.image_h, true);
        let lane_rms = group.lane_rms(lanes);
        let first = params[0];
        Ok(FitResult {
            shared: Some(ShapeParams {
                kpp: first.kpp,
                fpp: first.fpp,
                mpp: first.mpp,
                np: first.np,
            }),
            rms_residual: group.rms(),
            lanes: params,
            lane_rms,
        })
    } else {
        let mut params = Vec::with_capacity(lanes.len());
        let mut lane_rms = Vec::with_capacity(lanes.len());
        let mut ssr = 0.0;
        let mut count = 0usize;
        for lane in lanes {
            let single = std::slice::from_ref(lane);
            let group = GroupFit::solve(single, opts)?;
            params.extend(group.params(single, opts.image_h, false));
            lane_rms.extend(group.lane_rms(single));
            ssr += group.ssr;
            count += lane.len();
        }
        Ok(FitResult {
            lanes: params,
            shared: None,
            rms_residual: (ssr / count as f64).sqrt(),
            lane_rms,
        })
    }
}

/// Linear coefficients for one pole position.
struct GroupFit {
    cubic: bool,
    pole: f64,
    kpp: f64,
    mpp: f64,
    /// Per-lane `(b'', constant)`.
    per_lane: Vec<(f64, f64)>,
    ssr: f64,
    points: usize,
}

impl GroupFit {
    fn solve(lanes: &[LanePolyline], opts: &FitOptions) -> Result<Self> {
        let points: usize = lanes.iter().map(LanePolyline::len).sum();
        let linear = usize::from(opts.cubic) + 1 + 2 * lanes.len();
        if points < linear + 1 {
            return Err(Error::Underdetermined {
                points,
                params: linear + 1,
            });
        }

        let top = lanes
            .iter()
            .map(LanePolyline::first_row)
            .fold(f64::INFINITY, f64::min);
        let (lo, hi) = opts.bracket.unwrap_or((-opts.image_h, opts.image_h));
        let margin = 1e-3 * opts.image_h;
        let hi = hi.min(top - margin);
        if !(lo < hi) {
            return Err(Error::Domain(format!(
                "empty search bracket for f'' ([{lo}, {hi}])"
            )));
        }

        let eval = |pole: f64| Self::at_pole(lanes, opts.cubic, pole);

        // Geometric scan over the distance between the pole and the top row.
        let d_min = top - hi;
        let d_max = top - lo;
        let ratio = (d_max / d_min).powf(1.0 / (SCAN_SAMPLES - 1) as f64);
        let poles: Vec<f64> = (0..SCAN_SAMPLES)
            .map(|i| {
                if i + 1 == SCAN_SAMPLES {
                    lo
                } else {
                    top - d_min * ratio.powi(i as i32)
                }
            })
            .collect();
        let ssr: Vec<f64> = poles
            .iter()
            .map(|&p| eval(p).map(|g| g.ssr).unwrap_or(f64::INFINITY))
            .collect();
        // Refine every local minimum of the scan and keep the best.
        let mut best: Option<GroupFit> = None;
        for i in 0..SCAN_SAMPLES {
            let left = if i == 0 { f64::INFINITY } else { ssr[i - 1] };
            let right = ssr.get(i + 1).copied().unwrap_or(f64::INFINITY);
            if !ssr[i].is_finite() || ssr[i] > left || ssr[i] > right {
                continue;
            }
            // poles decrease with index
            let a = poles[(i + 1).min(SCAN_SAMPLES - 1)];
            let b = poles[i.saturating_sub(1)];
            let pole = golden_section(
                |p| eval(p).map(|g| g.ssr).unwrap_or(f64::INFINITY),
                a,
                b,
                opts.tolerance,
            );
            let mut fit = match eval(pole) {
                Ok(f) if f.ssr <= ssr[i] => f,
                _ => eval(poles[i])?,
            };
            fit.polish(lanes, top - margin);
            if best.as_ref().is_none_or(|b| fit.ssr < b.ssr) {
                best = Some(fit);
            }
        }
        best.ok_or_else(|| Error::Domain("no finite least-squares solution".into()))
    }

    fn at_pole(lanes: &[LanePolyline], cubic: bool, pole: f64) -> Result<Self> {
        let design = Design::new(lanes, cubic, pole);
        let coeffs = design.solve()?;
        let mut fit = GroupFit::from_coeffs(lanes.len(), cubic, pole, coeffs.as_slice());
        fit.points = design.rows;
        fit.ssr = fit.residual_ssr(lanes);
        if !fit.ssr.is_finite() {
            return Err(Error::Domain("non-finite residual".into()));
        }
        Ok(fit)
    }

    fn from_coeffs(n_lanes: usize, cubic: bool, pole: f64, c: &[f64]) -> Self {
        let offset = usize::from(cubic);
        let kpp = if cubic { c[0] } else { 0.0 };
        let mpp = c[offset];
        let per_lane = (0..n_lanes)
            .map(|t| (c[offset + 1 + 2 * t], c[offset + 2 + 2 * t]))
            .collect();
        GroupFit {
            cubic,
            pole,
            kpp,
            mpp,
            per_lane,
            ssr: 0.0,
            points: 0,
        }
    }

    fn predict(&self, lane: usize, v: f64) -> f64 {
        let inv = 1.0 / (v - self.pole);
        let (b, c) = self.per_lane[lane];
        (self.kpp * inv + self.mpp) * inv + b * v + c
    }

    fn residual_ssr(&self, lanes: &[LanePolyline]) -> f64 {
        lanes
            .iter()
            .enumerate()
            .flat_map(|(t, lane)| lane.points().iter().map(move |&(u, v)| (t, u, v)))
            .map(|(t, u, v)| {
                let r = u - self.predict(t, v);
                r * r
            })
            .sum()
    }

    fn lane_rms(&self, lanes: &[LanePolyline]) -> Vec<f64> {
        lanes
            .iter()
            .enumerate()
            .map(|(t, lane)| {
                let ssr: f64 = lane
                    .points()
                    .iter()
                    .map(|&(u, v)| (u - self.predict(t, v)).powi(2))
                    .sum();
                (ssr / lane.len() as f64).sqrt()
            })
            .collect()
    }

    fn rms(&self) -> f64 {
        (self.ssr / self.points as f64).sqrt()
    }

    /// Gauss-Newton on `(f'', linear coefficients)`.
    fn polish(&mut self, lanes: &[LanePolyline], pole_max: f64) {
        for _ in 0..POLISH_ITERS {
            if self.ssr == 0.0 {
                break;
            }
            let design = Design::new(lanes, self.cubic, self.pole);
            let cols = design.cols + 1;
            let mut jac = DMatrix::<f64>::zeros(design.rows, cols);
            let mut resid = DVector::<f64>::zeros(design.rows);
            let mut row = 0;
            for (t, lane) in lanes.iter().enumerate() {
                for &(u, v) in lane.points() {
                    let inv = 1.0 / (v - self.pole);
                    for c in 0..design.cols {
                        jac[(row, c)] = design.matrix[(row, c)];
                    }
                    jac[(row, design.cols)] =
                        2.0 * self.kpp * inv * inv * inv + self.mpp * inv * inv;
                    resid[row] = u - self.predict(t, v);
                    row += 1;
                }
            }
            let Some(step) = solve_scaled(jac, resid) else {
                break;
            };
            let base = self.coeffs();
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..BACKTRACK_STEPS {
                let pole = self.pole + scale * step[cols - 1];
                if pole < pole_max {
                    let current: Vec<f64> = base.iter().zip(step.iter()).map(|(c, s)| c + scale * s).collect();
                    let mut cand = GroupFit::from_coeffs(lanes.len(), self.cubic, pole, &current);
                    cand.points = self.points;
                    cand.ssr = cand.residual_ssr(lanes);
                    if cand.ssr < self.ssr {
                        accepted = Some(cand);
                        break;
                    }
                }
                scale *= 0.5;
            }
            let Some(cand) = accepted else {
                break;
            };
            let converged = (scale * step[cols - 1]).abs() <= 1e-14 * (1.0 + cand.pole.abs());
            *self = cand;
            if converged {
                break;
            }
        }
    }

    fn coeffs(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(2 + 2 * self.per_lane.len());
        if self.cubic {
            c.push(self.kpp);
        }
        c.push(self.mpp);
        for &(b, k) in &self.per_lane {
            c.push(b);
            c.push(k);
        }
        c
    }

    /// Splits the per-lane constants into `n'` and `b'''`.
    ///
    /// Shared fits choose `n'` so that `b''' = b'' f''` holds on average over
    /// lanes, which recovers the exact split for physically generated lanes.
    /// Single-lane fits fold everything into `n'` and report `b''' = 0`.
    fn params(&self, lanes: &[LanePolyline], image_h: f64, shared: bool) -> Vec<TiltedCurveParams> {
        let np = if shared {
            self.per_lane
                .iter()
                .map(|&(b, c)| c + b * self.pole)
                .sum::<f64>()
                / self.per_lane.len() as f64
        } else {
            self.per_lane[0].1
        };
        lanes
            .iter()
            .zip(&self.per_lane)
            .map(|(lane, &(b, c))| TiltedCurveParams {
                kpp: self.kpp,
                fpp: self.pole,
                mpp: self.mpp,
                np,
                bpp: b,
                bppp: np - c,
                alpha: lane.first_row() / image_h,
                beta: lane.last_row() / image_h,
            })
            .collect()
    }
}

struct Design {
    matrix: DMatrix<f64>,
    rhs: DVector<f64>,
    rows: usize,
    cols: usize,
}

impl Design {
    fn new(lanes: &[LanePolyline], cubic: bool, pole: f64) -> Self {
        let rows: usize = lanes.iter().map(LanePolyline::len).sum();
        let offset = usize::from(cubic);
        let cols = offset + 1 + 2 * lanes.len();
        let mut matrix = DMatrix::<f64>::zeros(rows, cols);
        let mut rhs = DVector::<f64>::zeros(rows);
        let mut r = 0;
        for (t, lane) in lanes.iter().enumerate() {
            for &(u, v) in lane.points() {
                let inv = 1.0 / (v - pole);
                if cubic {
                    matrix[(r, 0)] = inv * inv;
                }
                matrix[(r, offset)] = inv;
                matrix[(r, offset + 1 + 2 * t)] = v;
                matrix[(r, offset + 2 + 2 * t)] = 1.0;
                rhs[r] = u;
                r += 1;
            }
        }
        Design {
            matrix,
            rhs,
            rows,
            cols,
        }
    }

    fn solve(&self) -> Result<DVector<f64>> {
        solve_scaled(self.matrix.clone(), self.rhs.clone())
            .ok_or_else(|| Error::Domain("singular least-squares system".into()))
    }
}

/// Least squares with unit-norm column scaling.
fn solve_scaled(mut a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let mut scales = Vec::with_capacity(a.ncols());
    for mut col in a.column_iter_mut() {
        let norm = col.norm();
        let s = if norm > 0.0 && norm.is_finite() { norm } else { 1.0 };
        col /= s;
        scales.push(s);
    }
    let svd = a.svd(true, true);
    let x = svd.solve(&b, 1e-13).ok()?;
    let out = DVector::from_iterator(x.len(), x.iter().zip(&scales).map(|(v, s)| v / s));
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Golden-section search for the minimum of `f` on `[a, b]`.
pub(crate) fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..GOLDEN_MAX_ITERS {
        if b - a <= tol {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}
