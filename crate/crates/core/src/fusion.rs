//! Window fusion and template construction.
//!
//! The frames of a fusion window are voxelized into one Boolean grid
//! expressed in the last frame's camera, reprojected into a sparse depth
//! image, and inpainted into the dense template used for correction.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Rigid3};
use crate::image::{ColorImage, DepthImage};
use crate::io::RgbdFrame;
use crate::morphology::{dilate_gray, median_filter, WindowSize};
use crate::odometry::{constant_velocity_extend, MotionSource, OdometryError};
use crate::pointcloud::{
    depth_to_points, or_grids, reproject, transform_grid, voxelize, voxelize_points, PointCloudError, VoxelGrid,
    VoxelGridSpec,
};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion window is empty")]
    EmptyWindow,
    #[error("fusion window expects {expected} frames, got {got}")]
    WindowMismatch { expected: usize, got: usize },
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Odometry(#[from] OdometryError),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InpaintMethod {
    #[default]
    Dilate,
    Bilinear,
}

/// How frames are brought into the last frame's coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulation {
    /// Each frame's points are moved by the cumulative motion, then
    /// voxelized once.
    #[default]
    Points,
    /// The accumulated grid is moved voxel by voxel every step and the next
    /// frame OR-ed in. Re-quantizes at every step.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Frames per fusion window.
    pub window: usize,
    pub grid: VoxelGridSpec,
    /// Dilation window `N` used for inpainting.
    pub dilation_window: WindowSize,
    /// Upper bound on dilation passes.
    pub dilation_passes: usize,
    /// Dilation stops early once this fraction of pixels is valid.
    pub target_valid_ratio: f64,
    pub inpaint_method: InpaintMethod,
    /// Median prefilter applied to window frames before fusion; removes
    /// flicker outliers that would otherwise become phantom voxels.
    pub prefilter_median: Option<WindowSize>,
    pub accumulation: Accumulation,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            window: 10,
            grid: VoxelGridSpec::default(),
            dilation_window: WindowSize::new(5).unwrap(),
            dilation_passes: 3,
            target_valid_ratio: 0.99,
            inpaint_method: InpaintMethod::Dilate,
            prefilter_median: WindowSize::new(5).ok(),
            accumulation: Accumulation::Points,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.window == 0 {
            return Err(FusionError::InvalidConfig("window must be >= 1".into()));
        }
        self.grid.validate()?;
        if !(0.0..=1.0).contains(&self.target_valid_ratio) {
            return Err(FusionError::InvalidConfig("target_valid_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Dense reference depth for one epoch, in the camera of its last window
/// frame, with that frame's color image for registration.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub image: DepthImage,
    pub reference: ColorImage,
    pub created_at_frame: usize,
    pub epoch_id: u64,
}

/// Wall time spent in the two halves of template construction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FusionTiming {
    pub fusion: Duration,
    pub inpainting: Duration,
}

fn prefiltered(frames: &[RgbdFrame], cfg: &FusionConfig) -> Vec<RgbdFrame> {
    frames
        .iter()
        .map(|f| match cfg.prefilter_median {
            Some(n) => RgbdFrame {
                depth: median_filter(&f.depth, n),
                ..f.clone()
            },
            None => f.clone(),
        })
        .collect()
}

/// Per-frame motion into the last frame's camera.
fn motions_to_last(
    frames: &[RgbdFrame],
    intr: &Intrinsics<f64>,
    motion: &MotionSource,
) -> Result<Vec<Rigid3<f64>>, FusionError> {
    let n = frames.len();
    if n == 1 {
        return Ok(vec![Rigid3::identity()]);
    }
    if motion.reestimates() {
        let steps = frames
            .windows(2)
            .map(|w| motion.motion(&w[0], &w[1], intr))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = vec![Rigid3::identity(); n];
        for i in (0..n - 1).rev() {
            out[i] = out[i + 1].compose(&steps[i]);
        }
        Ok(out)
    } else {
        let t = motion.motion(&frames[0], &frames[1], intr)?;
        let mut powers = constant_velocity_extend(&t, n - 1);
        powers.reverse();
        powers.push(Rigid3::identity());
        Ok(powers)
    }
}

/// Fuses `frames` into one voxel grid in the last frame's camera.
pub fn fuse_window(
    frames: &[RgbdFrame],
    intr: &Intrinsics<f64>,
    cfg: &FusionConfig,
    motion: &MotionSource,
) -> Result<VoxelGrid, FusionError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(FusionError::EmptyWindow);
    }
    if frames.len() != cfg.window {
        return Err(FusionError::WindowMismatch {
            expected: cfg.window,
            got: frames.len(),
        });
    }
    let frames = prefiltered(frames, cfg);
    match cfg.accumulation {
        Accumulation::Points => {
            let motions = motions_to_last(&frames, intr, motion)?;
            let mut acc = VoxelGrid::empty(cfg.grid);
            for (f, m) in frames.iter().zip(&motions) {
                let cloud = depth_to_points(&f.depth, intr).transformed(m);
                acc = or_grids(&acc, &voxelize_points(&cloud, &cfg.grid))?;
            }
            Ok(acc)
        }
        Accumulation::Grid => {
            let mut acc = voxelize(&frames[0].depth, intr, &cfg.grid);
            let fixed = if frames.len() > 1 && !motion.reestimates() {
                Some(motion.motion(&frames[0], &frames[1], intr)?)
            } else {
                None
            };
            for i in 1..frames.len() {
                let step = match fixed {
                    Some(t) => t,
                    None => motion.motion(&frames[i - 1], &frames[i], intr)?,
                };
                acc = or_grids(&transform_grid(&acc, &step), &voxelize(&frames[i].depth, intr, &cfg.grid))?;
            }
            Ok(acc)
        }
    }
}

/// Fills zeros by linear interpolation between the nearest valid samples,
/// first along rows, then along columns. Runs touching the border have only
/// one anchor and are left for the column pass (or stay zero).
pub fn inpaint_bilinear(img: &DepthImage) -> DepthImage {
    fn fill_line(line: &mut [u16]) {
        let mut last: Option<usize> = None;
        for i in 0..line.len() {
            if line[i] == 0 {
                continue;
            }
            if let Some(l) = last {
                if i > l + 1 {
                    let (a, b) = (line[l] as f64, line[i] as f64);
                    for k in l + 1..i {
                        let t = (k - l) as f64 / (i - l) as f64;
                        line[k] = (a + (b - a) * t).round() as u16;
                    }
                }
            }
            last = Some(i);
        }
    }
    let (w, h) = img.dims();
    let mut rows = img.clone();
    for y in 0..h {
        fill_line(rows.row_mut(y));
    }
    let mut out = rows.clone();
    let mut col = vec![0u16; h];
    for x in 0..w {
        for (y, c) in col.iter_mut().enumerate() {
            *c = rows.get(x, y);
        }
        fill_line(&mut col);
        for (y, &c) in col.iter().enumerate() {
            out.set(x, y, c);
        }
    }
    out
}

/// Fills zeros from grayscale dilations of the image, repeating until the
/// valid ratio reaches `target_ratio` or `passes` is exhausted. Valid
/// pixels keep their values.
pub fn inpaint_dilate(img: &DepthImage, n: WindowSize, passes: usize, target_ratio: f64) -> DepthImage {
    let mut out = img.clone();
    for _ in 0..passes {
        if out.valid_ratio() >= target_ratio {
            break;
        }
        let dilated = dilate_gray(&out, n);
        for (o, d) in out.as_mut_slice().iter_mut().zip(dilated.as_slice()) {
            if *o == 0 {
                *o = *d;
            }
        }
    }
    out
}

pub fn inpaint(img: &DepthImage, cfg: &FusionConfig) -> DepthImage {
    match cfg.inpaint_method {
        InpaintMethod::Dilate => inpaint_dilate(img, cfg.dilation_window, cfg.dilation_passes, cfg.target_valid_ratio),
        InpaintMethod::Bilinear => inpaint_bilinear(img),
    }
}

/// fuse → reproject → inpaint.
pub fn build_template(
    frames: &[RgbdFrame],
    intr: &Intrinsics<f64>,
    cfg: &FusionConfig,
    motion: &MotionSource,
    epoch_id: u64,
) -> Result<Template, FusionError> {
    build_template_timed(frames, intr, cfg, motion, epoch_id).map(|(t, _)| t)
}

pub fn build_template_timed(
    frames: &[RgbdFrame],
    intr: &Intrinsics<f64>,
    cfg: &FusionConfig,
    motion: &MotionSource,
    epoch_id: u64,
) -> Result<(Template, FusionTiming), FusionError> {
    let start = Instant::now();
    let grid = fuse_window(frames, intr, cfg, motion)?;
    let last = frames.last().expect("fuse_window rejects empty windows");
    let sparse = reproject(&grid, intr, last.depth.dims());
    let fused_at = Instant::now();
    let image = inpaint(&sparse, cfg);
    let timing = FusionTiming {
        fusion: fused_at - start,
        inpainting: fused_at.elapsed(),
    };
    Ok((
        Template {
            image,
            reference: last.color.clone(),
            created_at_frame: last.index,
            epoch_id,
        },
        timing,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{hole_ratio, psnr};
    use crate::odometry::frame_from;
    use crate::synth::{inject_geometric_holes, render_frame, Primitive, SceneSpec};

    fn intr() -> Intrinsics<f64> {
        Intrinsics::new(100.0, 100.0, 47.5, 35.5)
    }

    fn literal(window: usize) -> FusionConfig {
        FusionConfig {
            window,
            prefilter_median: None,
            ..Default::default()
        }
    }

    fn ramp(index: usize) -> RgbdFrame {
        let d = DepthImage::from_fn(96, 72, |x, y| 1500 + (x * 7 + y * 3) as u16);
        frame_from(index, ColorImage::filled(96, 72, [50, 60, 70]), d)
    }

    #[test]
    fn window_of_one_is_voxelize() {
        let f = ramp(0);
        let g = fuse_window(&[f.clone()], &intr(), &literal(1), &MotionSource::Fixed(Rigid3::identity())).unwrap();
        assert_eq!(g, voxelize(&f.depth, &intr(), &VoxelGridSpec::default()));
    }

    #[test]
    fn identical_frames_fuse_to_one_frame() {
        let frames: Vec<_> = (0..10).map(ramp).collect();
        let id = MotionSource::Fixed(Rigid3::identity());
        for acc in [Accumulation::Points, Accumulation::Grid] {
            let cfg = FusionConfig {
                accumulation: acc,
                ..literal(10)
            };
            let g = fuse_window(&frames, &intr(), &cfg, &id).unwrap();
            assert_eq!(g, voxelize(&frames[0].depth, &intr(), &cfg.grid));
        }
    }

    #[test]
    fn window_length_checked() {
        let id = MotionSource::Fixed(Rigid3::identity());
        assert!(matches!(fuse_window(&[], &intr(), &literal(1), &id), Err(FusionError::EmptyWindow)));
        assert!(matches!(
            fuse_window(&[ramp(0)], &intr(), &literal(2), &id),
            Err(FusionError::WindowMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn occupancy_monotone_in_window() {
        let frames: Vec<_> = (0..6)
            .map(|i| {
                let mut f = ramp(i);
                for x in (i * 10)..(i * 10 + 8) {
                    for y in 0..72 {
                        f.depth.set(x, y, 0);
                    }
                }
                f
            })
            .collect();
        let id = MotionSource::Fixed(Rigid3::identity());
        let mut prev: Option<VoxelGrid> = None;
        for n in 1..=6 {
            let g = fuse_window(&frames[..n], &intr(), &literal(n), &id).unwrap();
            if let Some(p) = prev {
                assert!(p.is_subset_of(&g));
            }
            prev = Some(g);
        }
    }

    #[test]
    fn complementary_holes_shrink_after_fusion() {
        let base = DepthImage::filled(96, 72, 2000);
        let mut a = base.clone();
        let mut b = base.clone();
        for y in 0..72 {
            for x in 10..30 {
                a.set(x, y, 0);
            }
            for x in 60..80 {
                b.set(x, y, 0);
            }
        }
        let color = ColorImage::filled(96, 72, [0; 3]);
        let frames = [frame_from(0, color.clone(), a.clone()), frame_from(1, color, b.clone())];
        let id = MotionSource::Fixed(Rigid3::identity());
        let cfg = literal(2);
        let fused = reproject(&fuse_window(&frames, &intr(), &cfg, &id).unwrap(), &intr(), (96, 72));
        let holes = |d: &DepthImage| d.len() - d.count_valid();
        let single = reproject(&voxelize(&a, &intr(), &cfg.grid), &intr(), (96, 72));
        assert!(holes(&fused) <= holes(&single));

        let t = build_template(&frames, &intr(), &cfg, &id, 0).unwrap();
        assert!(hole_ratio(&t.image) < hole_ratio(&a));
        assert!(hole_ratio(&t.image) < hole_ratio(&b));
        assert_eq!(t.created_at_frame, 1);
    }

    #[test]
    fn inpaint_bilinear_examples() {
        let full = DepthImage::from_fn(5, 4, |x, y| 100 + (x + y) as u16);
        assert_eq!(inpaint_bilinear(&full), full);
        let row = DepthImage::new(3, 1, vec![1000, 0, 2000]).unwrap();
        assert_eq!(inpaint_bilinear(&row).into_vec(), vec![1000, 1500, 2000]);
        let zero = DepthImage::filled(6, 6, 0);
        assert_eq!(inpaint_bilinear(&zero), zero);
    }

    #[test]
    fn inpaint_dilate_keeps_valid_pixels() {
        let mut sparse = DepthImage::filled(20, 20, 0);
        for y in (0..20).step_by(4) {
            for x in (0..20).step_by(4) {
                sparse.set(x, y, 1000 + (x * 20 + y) as u16);
            }
        }
        let filled = inpaint_dilate(&sparse, WindowSize::new(5).unwrap(), 3, 0.99);
        assert_eq!(filled.count_valid(), 400);
        for (s, f) in sparse.as_slice().iter().zip(filled.as_slice()) {
            if *s != 0 {
                assert_eq!(s, f);
            }
        }
    }

    #[test]
    fn template_beats_raw_frame_with_holes() {
        let poses: Vec<_> = (0..5).map(|i| Rigid3::from_translation(0.01 * i as f64, 0.0, 0.0)).collect();
        let spec = SceneSpec {
            primitives: vec![Primitive::Box {
                center: [0.0, 0.0, 1.2],
                size: [0.4, 0.4, 0.3],
                texture: 1,
            }],
            background_depth: 2.5,
            trajectory: poses.clone(),
            width: 128,
            height: 96,
            intrinsics: Intrinsics::new(110.0, 110.0, 63.5, 47.5).with_baseline(0.05),
            seed: 5,
            cut: None,
        };
        let mut frames = Vec::new();
        let mut gts = Vec::new();
        for i in 0..5 {
            let (c, gt) = render_frame(&spec, i);
            let (holed, _) = inject_geometric_holes(&gt, &spec.intrinsics, 0.05);
            frames.push(frame_from(i, c, holed));
            gts.push(gt);
        }
        let cfg = FusionConfig {
            grid: VoxelGridSpec::isotropic(512, 0.01),
            ..literal(5)
        };
        let t = build_template(&frames, &spec.intrinsics, &cfg, &MotionSource::GroundTruth(&poses), 3).unwrap();
        let raw = psnr(&frames[4].depth, &gts[4]).unwrap();
        let tpl = psnr(&t.image, &gts[4]).unwrap();
        assert!(tpl >= raw, "template {tpl} dB < raw {raw} dB");
        assert_eq!(t.epoch_id, 3);
    }
}
