//! Frame-to-frame rigid motion from RGB-D pairs.
//!
//! Dense photometric alignment: every valid depth pixel of the first frame
//! is lifted to 3D, moved by the current motion estimate, projected into the
//! second frame, and the intensity difference is minimized by damped
//! Gauss–Newton over a 6-dof twist, coarse to fine over an image pyramid.
//!
//! The returned transform `T` maps points in the first camera's frame into
//! the second camera's frame. With camera-to-world poses `C0, C1` this is
//! `C1⁻¹·C0`.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Point3, Rigid3};
use crate::image::to_gray;
use crate::morphology::{median_filter, WindowSize};
use crate::io::RgbdFrame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdometryError {
    #[error("first frame has {found} valid depth pixels, need {required}")]
    InsufficientValidDepth { found: usize, required: usize },
    #[error("frame dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("invalid odometry config: {0}")]
    InvalidConfig(String),
    #[error("no pose available for frame {0}")]
    MissingPose(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryConfig {
    pub pyramid_levels: usize,
    pub max_iterations: usize,
    /// Stop a level once the twist update norm falls below this.
    pub convergence_epsilon: f64,
    pub min_valid_pixels: usize,
    /// Estimate motion between every consecutive pair of the fusion window
    /// instead of once between its first two frames.
    pub reestimate_per_frame: bool,
    /// Median window applied to depth before back-projection; suppresses
    /// flicker spikes that would otherwise survive into the pyramid.
    pub depth_median: Option<WindowSize>,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            max_iterations: 10,
            convergence_epsilon: 1e-6,
            min_valid_pixels: 500,
            reestimate_per_frame: false,
            depth_median: WindowSize::new(5).ok(),
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<(), OdometryError> {
        if self.pyramid_levels == 0 {
            return Err(OdometryError::InvalidConfig("pyramid_levels must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(OdometryError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_epsilon > 0.0) {
            return Err(OdometryError::InvalidConfig("convergence_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Full result of one estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct OdometryEstimate {
    pub transform: Rigid3<f64>,
    /// Mean robust photometric cost at full resolution for the identity.
    pub initial_cost: f64,
    /// Same cost for the returned transform.
    pub final_cost: f64,
    /// Cost after every accepted step, per level, coarse first.
    pub accepted_costs: Vec<Vec<f64>>,
    /// True when the optimizer improved the cost by less than 1% and the
    /// identity was returned instead.
    pub fell_back: bool,
    pub iterations: usize,
}

const HUBER_DELTA: f64 = 12.0;
const MIN_IMPROVEMENT: f64 = 0.01;

struct Level {
    w: usize,
    h: usize,
    gray: Vec<f32>,
    depth: Vec<f32>,
    intr: Intrinsics<f64>,
}

impl Level {
    fn from_frame(frame: &RgbdFrame, intr: &Intrinsics<f64>, median: Option<WindowSize>) -> Self {
        let (w, h) = frame.depth.dims();
        let filtered = median.map(|n| median_filter(&frame.depth, n));
        let depth = filtered.as_ref().unwrap_or(&frame.depth);
        Self {
            w,
            h,
            gray: to_gray(&frame.color).as_slice().iter().map(|&g| g as f32).collect(),
            depth: depth.as_slice().iter().map(|&d| d as f32 * 1e-3).collect(),
            intr: *intr,
        }
    }

    /// 2×2 block average for intensity; nearest valid surface for depth.
    fn halve(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut gray = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let idx = [
                    2 * y * self.w + 2 * x,
                    2 * y * self.w + 2 * x + 1,
                    (2 * y + 1) * self.w + 2 * x,
                    (2 * y + 1) * self.w + 2 * x + 1,
                ];
                gray.push(idx.iter().map(|&i| self.gray[i]).sum::<f32>() / 4.0);
                let d = idx
                    .iter()
                    .map(|&i| self.depth[i])
                    .filter(|&d| d > 0.0)
                    .fold(f32::INFINITY, f32::min);
                depth.push(if d.is_finite() { d } else { 0.0 });
            }
        }
        Self {
            w,
            h,
            gray,
            depth,
            intr: self.intr.halved(),
        }
    }

    fn pyramid(base: Self, levels: usize) -> Vec<Self> {
        let mut out = vec![base];
        while out.len() < levels {
            let last = out.last().unwrap();
            if last.w < 16 || last.h < 16 {
                break;
            }
            out.push(last.halve());
        }
        out
    }

    /// Bilinear intensity and central-difference gradient at `(u, v)`.
    #[inline]
    fn sample(&self, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        if u < 1.0 || v < 1.0 || u > (self.w - 2) as f64 || v > (self.h - 2) as f64 {
            return None;
        }
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (ax, ay) = (u - x0 as f64, v - y0 as f64);
        let at = |x: usize, y: usize| self.gray[y * self.w + x] as f64;
        let bil = |f: &dyn Fn(usize, usize) -> f64| {
            let top = f(x0, y0) * (1.0 - ax) + f(x0 + 1, y0) * ax;
            let bot = f(x0, y0 + 1) * (1.0 - ax) + f(x0 + 1, y0 + 1) * ax;
            top * (1.0 - ay) + bot * ay
        };
        let i = bil(&at);
        let gx = bil(&|x, y| {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(self.w - 1);
            (at(xr, y) - at(xl, y)) / (xr - xl) as f64
        });
        let gy = bil(&|x, y| {
            let yt = y.saturating_sub(1);
            let yb = (y + 1).min(self.h - 1);
            (at(x, yb) - at(x, yt)) / (yb - yt) as f64
        });
        Some((i, gx, gy))
    }
}

/// Valid 3D points of the reference level with their intensities.
fn reference_points(level: &Level) -> Vec<(Point3<f64>, f64)> {
    let mut pts = Vec::new();
    for y in 0..level.h {
        for x in 0..level.w {
            let d = level.depth[y * level.w + x];
            if d > 0.0 {
                let p = level.intr.unproject(x as f64, y as f64, d as f64);
                pts.push((p, level.gray[y * level.w + x] as f64));
            }
        }
    }
    pts
}

fn huber(r: f64) -> f64 {
    let a = r.abs();
    if a <= HUBER_DELTA {
        0.5 * r * r
    } else {
        HUBER_DELTA * (a - 0.5 * HUBER_DELTA)
    }
}

/// Mean robust cost over points that land inside the target.
fn cost(points: &[(Point3<f64>, f64)], target: &Level, t: &Rigid3<f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, i0) in points {
        let q = t.apply(*p);
        if q.z <= 1e-6 {
            continue;
        }
        let [u, v] = target.intr.project(q);
        if let Some((i1, _, _)) = target.sample(u, v) {
            sum += huber(i1 - i0);
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// Normal equations of the linearized problem at `t`.
fn normal_equations(points: &[(Point3<f64>, f64)], target: &Level, t: &Rigid3<f64>) -> (Matrix6<f64>, Vector6<f64>, usize) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut n = 0;
    let (fx, fy) = (target.intr.fx, target.intr.fy);
    for (p, i0) in points {
        let q = t.apply(*p);
        if q.z <= 1e-6 {
            continue;
        }
        let [u, v] = target.intr.project(q);
        let Some((i1, gx, gy)) = target.sample(u, v) else {
            continue;
        };
        let r = i1 - i0;
        let w = if r.abs() <= HUBER_DELTA { 1.0 } else { HUBER_DELTA / r.abs() };
        let a = gx * fx / q.z;
        let b = gy * fy / q.z;
        let c = -(a * q.x + b * q.y) / q.z;
        // d(residual)/d(ρ, ω) for the left perturbation exp(ξ)·T.
        let j = Vector6::new(a, b, c, q.y * c - q.z * b, q.z * a - q.x * c, q.x * b - q.y * a);
        h += w * j * j.transpose();
        g += w * r * j;
        n += 1;
    }
    (h, g, n)
}

/// Estimates the motion taking `f0`'s camera frame to `f1`'s.
pub fn estimate_odometry(
    f0: &RgbdFrame,
    f1: &RgbdFrame,
    intr: &Intrinsics<f64>,
    cfg: &OdometryConfig,
) -> Result<Rigid3<f64>, OdometryError> {
    estimate_odometry_detailed(f0, f1, intr, cfg, &Rigid3::identity()).map(|e| e.transform)
}

/// As [`estimate_odometry`], starting from `initial` and reporting costs.
pub fn estimate_odometry_detailed(
    f0: &RgbdFrame,
    f1: &RgbdFrame,
    intr: &Intrinsics<f64>,
    cfg: &OdometryConfig,
    initial: &Rigid3<f64>,
) -> Result<OdometryEstimate, OdometryError> {
    cfg.validate()?;
    if f0.depth.dims() != f1.depth.dims() || f0.color.dims() != f0.depth.dims() || f1.color.dims() != f1.depth.dims() {
        return Err(OdometryError::DimensionMismatch(f0.depth.dims(), f1.depth.dims()));
    }
    let found = f0.depth.count_valid();
    if found < cfg.min_valid_pixels.max(1) {
        return Err(OdometryError::InsufficientValidDepth {
            found,
            required: cfg.min_valid_pixels.max(1),
        });
    }
    let src = Level::pyramid(Level::from_frame(f0, intr, cfg.depth_median), cfg.pyramid_levels);
    let dst = Level::pyramid(Level::from_frame(f1, intr, None), cfg.pyramid_levels);

    let mut t = *initial;
    let mut accepted_costs = Vec::new();
    let mut iterations = 0;
    for (s, d) in src.iter().zip(&dst).rev() {
        let points = reference_points(s);
        let mut level_costs = Vec::new();
        let mut current = cost(&points, d, &t);
        level_costs.push(current);
        let mut lambda = 1e-4;
        for _ in 0..cfg.max_iterations {
            iterations += 1;
            let (h, g, n) = normal_equations(&points, d, &t);
            if n < 6 {
                break;
            }
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                break;
            };
            let delta = -chol.solve(&g);
            if !delta.iter().all(|v| v.is_finite()) {
                break;
            }
            let candidate = Rigid3::exp([delta[0], delta[1], delta[2], delta[3], delta[4], delta[5]]).compose(&t);
            let c = cost(&points, d, &candidate);
            if c < current {
                t = candidate;
                current = c;
                level_costs.push(c);
                lambda = (lambda * 0.5).max(1e-7);
            } else {
                lambda *= 10.0;
            }
            if delta.norm() < cfg.convergence_epsilon {
                break;
            }
        }
        accepted_costs.push(level_costs);
    }

    let full_points = reference_points(&src[0]);
    let initial_cost = cost(&full_points, &dst[0], &Rigid3::identity());
    let final_cost = cost(&full_points, &dst[0], &t);
    let improved = initial_cost.is_finite() && final_cost < initial_cost * (1.0 - MIN_IMPROVEMENT);
    let fell_back = !improved && !(initial_cost == 0.0 && final_cost == 0.0);
    let transform = if improved { t } else { Rigid3::identity() };
    Ok(OdometryEstimate {
        transform,
        initial_cost,
        final_cost: if improved { final_cost } else { initial_cost },
        accepted_costs,
        fell_back,
        iterations,
    })
}

/// `[t, t², …, t^steps]`: the cumulative motion over successive frames
/// under a constant-velocity assumption.
pub fn constant_velocity_extend(t: &Rigid3<f64>, steps: usize) -> Vec<Rigid3<f64>> {
    let mut out = Vec::with_capacity(steps);
    let mut acc = Rigid3::identity();
    for _ in 0..steps {
        acc = t.compose(&acc);
        out.push(acc);
    }
    out
}

/// Where fusion obtains inter-frame motion.
#[derive(Clone, Copy, Debug)]
pub enum MotionSource<'a> {
    /// Dense photometric estimate.
    Estimate(&'a OdometryConfig),
    /// Known camera-to-world poses indexed by frame index.
    GroundTruth(&'a [Rigid3<f64>]),
    /// The same motion for every pair.
    Fixed(Rigid3<f64>),
}

impl MotionSource<'_> {
    /// Motion mapping `f0`'s camera frame into `f1`'s.
    pub fn motion(&self, f0: &RgbdFrame, f1: &RgbdFrame, intr: &Intrinsics<f64>) -> Result<Rigid3<f64>, OdometryError> {
        match self {
            MotionSource::Estimate(cfg) => estimate_odometry(f0, f1, intr, cfg),
            MotionSource::GroundTruth(poses) => {
                let c0 = poses.get(f0.index).ok_or(OdometryError::MissingPose(f0.index))?;
                let c1 = poses.get(f1.index).ok_or(OdometryError::MissingPose(f1.index))?;
                Ok(c1.inverse().compose(c0))
            }
            MotionSource::Fixed(t) => Ok(*t),
        }
    }

    pub fn reestimates(&self) -> bool {
        match self {
            MotionSource::Estimate(cfg) => cfg.reestimate_per_frame,
            MotionSource::GroundTruth(_) => true,
            MotionSource::Fixed(_) => false,
        }
    }
}

/// Ground-truth motion between two camera-to-world poses.
pub fn relative_motion(c0: &Rigid3<f64>, c1: &Rigid3<f64>) -> Rigid3<f64> {
    c1.inverse().compose(c0)
}

#[cfg(test)]
pub(crate) fn frame_from(index: usize, color: crate::image::ColorImage, depth: crate::image::DepthImage) -> RgbdFrame {
    RgbdFrame {
        index,
        color,
        depth,
        timestamp_ms: index as f64 * crate::io::DEFAULT_FRAME_INTERVAL_MS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::DepthImage;
    use crate::image::ColorImage;
    use crate::synth::{render_frame, Primitive, SceneSpec};

    fn scene(poses: Vec<Rigid3<f64>>) -> SceneSpec {
        SceneSpec {
            primitives: vec![
                Primitive::Box {
                    center: [-0.3, 0.1, 1.6],
                    size: [0.4, 0.5, 0.4],
                    texture: 1,
                },
                Primitive::Sphere {
                    center: [0.35, -0.1, 1.9],
                    radius: 0.25,
                    texture: 2,
                },
            ],
            background_depth: 3.0,
            trajectory: poses,
            width: 160,
            height: 120,
            intrinsics: Intrinsics::new(120.0, 120.0, 79.5, 59.5),
            seed: 11,
            cut: None,
        }
    }

    fn frames(s: &SceneSpec) -> Vec<RgbdFrame> {
        (0..s.frame_count())
            .map(|i| {
                let (c, d) = render_frame(s, i);
                frame_from(i, c, d)
            })
            .collect()
    }

    #[test]
    fn identical_frames_give_identity() {
        let s = scene(vec![Rigid3::identity(); 2]);
        let f = frames(&s);
        let e = estimate_odometry_detailed(&f[0], &f[1], &s.intrinsics, &OdometryConfig::default(), &Rigid3::identity())
            .unwrap();
        assert!(e.transform.translation_norm() <= 1e-3);
        assert!(e.transform.rotation_angle().to_degrees() <= 0.05);
    }

    #[test]
    fn recovers_lateral_translation() {
        let poses = vec![Rigid3::identity(), Rigid3::from_translation(0.02, 0.0, 0.0)];
        let s = scene(poses.clone());
        let f = frames(&s);
        let cfg = OdometryConfig::default();
        let e = estimate_odometry_detailed(&f[0], &f[1], &s.intrinsics, &cfg, &Rigid3::identity()).unwrap();
        let gt = relative_motion(&poses[0], &poses[1]);
        assert!((e.transform.translation[0] - gt.translation[0]).abs() <= 0.005, "{:?}", e.transform);
        assert!(!e.fell_back);
        assert!(e.transform.is_valid());
        for level in &e.accepted_costs {
            assert!(level.windows(2).all(|w| w[1] <= w[0]), "cost increased: {level:?}");
        }
    }

    #[test]
    fn textureless_frames_fall_back() {
        let depth = DepthImage::filled(64, 48, 1500);
        let color = ColorImage::filled(64, 48, [90, 90, 90]);
        let f0 = frame_from(0, color.clone(), depth.clone());
        let f1 = frame_from(1, color, depth);
        let intr = Intrinsics::new(60.0, 60.0, 31.5, 23.5);
        let cfg = OdometryConfig {
            min_valid_pixels: 10,
            ..Default::default()
        };
        let e = estimate_odometry_detailed(&f0, &f1, &intr, &cfg, &Rigid3::identity()).unwrap();
        assert_eq!(e.transform, Rigid3::identity());

        let empty = frame_from(0, ColorImage::filled(64, 48, [0; 3]), DepthImage::filled(64, 48, 0));
        assert!(matches!(
            estimate_odometry(&empty, &empty, &intr, &cfg),
            Err(OdometryError::InsufficientValidDepth { found: 0, .. })
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let a = frame_from(0, ColorImage::filled(8, 8, [0; 3]), DepthImage::filled(8, 8, 1000));
        let b = frame_from(1, ColorImage::filled(9, 8, [0; 3]), DepthImage::filled(9, 8, 1000));
        let intr = Intrinsics::new(8.0, 8.0, 3.5, 3.5);
        assert!(matches!(
            estimate_odometry(&a, &b, &intr, &OdometryConfig::default()),
            Err(OdometryError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn constant_velocity_examples() {
        assert!(constant_velocity_extend(&Rigid3::identity(), 5)
            .iter()
            .all(|t| *t == Rigid3::identity()));
        let t = constant_velocity_extend(&Rigid3::from_translation(0.01, 0.0, 0.0), 3);
        for (k, x) in [0.01, 0.02, 0.03].iter().enumerate() {
            assert!((t[k].translation[0] - x).abs() < 1e-12);
        }
        let r = constant_velocity_extend(&Rigid3::rotation_z(10f64.to_radians()), 2);
        assert!((r[0].rotation_angle().to_degrees() - 10.0).abs() < 1e-9);
        assert!((r[1].rotation_angle().to_degrees() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ground_truth_source_matches_relative_pose() {
        let poses = vec![Rigid3::identity(), Rigid3::from_translation(0.1, 0.0, 0.0)];
        let a = frame_from(0, ColorImage::filled(4, 4, [0; 3]), DepthImage::filled(4, 4, 1));
        let b = frame_from(1, ColorImage::filled(4, 4, [0; 3]), DepthImage::filled(4, 4, 1));
        let intr = Intrinsics::new(4.0, 4.0, 1.5, 1.5);
        let t = MotionSource::GroundTruth(&poses).motion(&a, &b, &intr).unwrap();
        assert!((t.translation[0] + 0.1).abs() < 1e-12);
    }
}
