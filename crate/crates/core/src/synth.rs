//! Synthetic RGB-D sequences with known ground truth.
//!
//! A ray caster renders axis-aligned boxes and spheres in front of a
//! fronto-parallel background plane, textured with a solid (3D) procedural
//! pattern so the same surface point has the same color from every view.
//! Noise injectors then add the two defect classes of stereo depth sensors:
//! occlusion holes and per-frame flicker.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Rigid3};
use crate::image::{ColorImage, DepthImage, GrayImage, Plane};
use crate::io::{self, DatasetError, FrameFile, SequenceManifest};
use crate::rng::{counter_u64, counter_unit, stream_rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene has no primitives")]
    EmptyScene,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Box { center: [f64; 3], size: [f64; 3], texture: u32 },
    Sphere { center: [f64; 3], radius: f64, texture: u32 },
}

impl Primitive {
    fn texture(&self) -> u32 {
        match self {
            Primitive::Box { texture, .. } | Primitive::Sphere { texture, .. } => *texture,
        }
    }

    /// Nearest positive ray parameter, for a ray `o + t·d`.
    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match self {
            Primitive::Box { center, size, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    let lo = center[a] - size[a] / 2.0;
                    let hi = center[a] + size[a] / 2.0;
                    if d[a].abs() < 1e-15 {
                        if o[a] < lo || o[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                if t0 > t1 || t1 <= 0.0 {
                    None
                } else if t0 > 0.0 {
                    Some(t0)
                } else {
                    Some(t1)
                }
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
                let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let b = 2.0 * (oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2]);
                let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let (ta, tb) = ((-b - s) / (2.0 * a), (-b + s) / (2.0 * a));
                if ta > 0.0 {
                    Some(ta)
                } else if tb > 0.0 {
                    Some(tb)
                } else {
                    None
                }
            }
        }
    }
}

/// Replaces the scene contents from `at_frame` on (a hard scene cut).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCut {
    pub at_frame: usize,
    pub primitives: Vec<Primitive>,
    pub background_depth: f64,
    pub texture_seed: u64,
}

/// Everything needed to render a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// World z of the background plane, meters.
    pub background_depth: f64,
    /// Camera-to-world pose per frame.
    pub trajectory: Vec<Rigid3<f64>>,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics<f64>,
    pub seed: u64,
    #[serde(default)]
    pub cut: Option<SceneCut>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.primitives.is_empty() {
            return Err(SynthError::EmptyScene);
        }
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::InvalidScene("image dimensions must be positive".into()));
        }
        self.intrinsics
            .validate(self.width, self.height)
            .map_err(|e| SynthError::InvalidScene(e.to_string()))?;
        if !(self.background_depth > 0.0 && self.background_depth <= 65.535) {
            return Err(SynthError::InvalidScene(format!(
                "background depth {} outside (0, 65.535] m",
                self.background_depth
            )));
        }
        if self.trajectory.is_empty() {
            return Err(SynthError::InvalidScene("trajectory is empty".into()));
        }
        if let Some(bad) = self.trajectory.iter().position(|p| !p.is_valid()) {
            return Err(SynthError::InvalidScene(format!("pose {bad} is not a rigid transform")));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.trajectory.len()
    }
}

/// How a sequence's camera moves. Expands into explicit poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Constant velocity: translation per frame plus a yaw rate (about +y).
    Linear {
        frames: usize,
        #[serde(default)]
        start: [f64; 3],
        #[serde(default)]
        velocity: [f64; 3],
        #[serde(default)]
        yaw_rate_deg: f64,
    },
    Explicit { poses: Vec<Rigid3<f64>> },
}

impl TrajectorySpec {
    pub fn poses(&self) -> Vec<Rigid3<f64>> {
        match self {
            TrajectorySpec::Linear {
                frames,
                start,
                velocity,
                yaw_rate_deg,
            } => (0..*frames)
                .map(|i| {
                    let f = i as f64;
                    Rigid3::from_axis_angle([0.0, 1.0, 0.0], (yaw_rate_deg * f).to_radians()).with_translation([
                        start[0] + velocity[0] * f,
                        start[1] + velocity[1] * f,
                        start[2] + velocity[2] * f,
                    ])
                })
                .collect(),
            TrajectorySpec::Explicit { poses } => poses.clone(),
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            TrajectorySpec::Linear { frames, .. } => *frames,
            TrajectorySpec::Explicit { poses } => poses.len(),
        }
    }

    pub fn set_frames(&mut self, n: usize) {
        match self {
            TrajectorySpec::Linear { frames, .. } => *frames = n,
            TrajectorySpec::Explicit { poses } => poses.truncate(n),
        }
    }
}

/// Serializable scene description used by configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics<f64>,
    pub background_depth: f64,
    pub primitives: Vec<Primitive>,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cut: Option<SceneCut>,
}

impl SceneConfig {
    pub fn to_spec(&self) -> SceneSpec {
        SceneSpec {
            primitives: self.primitives.clone(),
            background_depth: self.background_depth,
            trajectory: self.trajectory.poses(),
            width: self.width,
            height: self.height,
            intrinsics: self.intrinsics,
            seed: self.seed,
            cut: self.cut.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoleMode {
    /// Stereo occlusion shadows computed from disparity.
    #[default]
    Geometric,
    /// Random discs covering an exact fraction of the image.
    Blob,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Fraction of pixels per frame hit by flicker.
    pub flicker_fraction: f64,
    /// Inclusive depth range (mm) of non-zero flicker values: the sensor's
    /// operating range.
    pub flicker_range: [u16; 2],
    pub hole_mode: HoleMode,
    /// Target hole fraction in blob mode.
    pub blob_fraction: f64,
    /// Multiplicative depth noise bound θ: `d ← d + d·β`, `β ~ U[−θ, θ]`.
    pub theta: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            flicker_fraction: 0.05,
            flicker_range: [100, 10_000],
            hole_mode: HoleMode::Geometric,
            blob_fraction: 0.1,
            theta: 0.0,
            seed: 1,
        }
    }
}

impl NoiseSpec {
    pub fn clean() -> Self {
        Self {
            flicker_fraction: 0.0,
            flicker_range: [100, 10_000],
            hole_mode: HoleMode::None,
            blob_fraction: 0.0,
            theta: 0.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.flicker_fraction) || !frac(self.blob_fraction) {
            return Err(SynthError::InvalidScene("noise fractions must lie in [0, 1]".into()));
        }
        if self.flicker_range[0] == 0 || self.flicker_range[0] >= self.flicker_range[1] {
            return Err(SynthError::InvalidScene("flicker_range must be [lo, hi] with 0 < lo < hi".into()));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(SynthError::InvalidScene("theta must be non-negative".into()));
        }
        Ok(())
    }
}

// RNG stream tags.
const STREAM_TEXTURE: u64 = 1;
const STREAM_FLICKER: u64 = 2;
const STREAM_DEPTH_NOISE: u64 = 3;
const STREAM_BLOB: u64 = 4;

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.85, 0.70],
    [0.55, 0.80, 0.95],
    [0.90, 0.55, 0.50],
    [0.60, 0.90, 0.60],
    [0.85, 0.75, 0.95],
    [0.95, 0.95, 0.55],
];

fn lattice(seed: u64, tex: u32, octave: u64, c: [i64; 3]) -> f64 {
    let key = (c[0] as u64).wrapping_mul(0x9E37_79B1)
        ^ (c[1] as u64).wrapping_mul(0x85EB_CA77).rotate_left(21)
        ^ (c[2] as u64).wrapping_mul(0xC2B2_AE3D).rotate_left(42);
    counter_unit(seed ^ ((tex as u64) << 32), STREAM_TEXTURE + (octave << 8), key)
}

/// Smooth trilinear value noise in `[0, 1]`.
fn value_noise(seed: u64, tex: u32, octave: u64, p: [f64; 3]) -> f64 {
    let f = p.map(f64::floor);
    let c = [f[0] as i64, f[1] as i64, f[2] as i64];
    let t = [0, 1, 2].map(|a| {
        let x = p[a] - f[a];
        x * x * (3.0 - 2.0 * x)
    });
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let w = (0..3).fold(1.0, |w, a| w * if o[a] == 1 { t[a] } else { 1.0 - t[a] });
        acc += w * lattice(seed, tex, octave, [c[0] + o[0] as i64, c[1] + o[1] as i64, c[2] + o[2] as i64]);
    }
    acc
}

/// Solid texture: two octaves of value noise over an aperiodic random
/// block pattern, tinted per texture id.
fn shade(seed: u64, tex: u32, p: [f64; 3]) -> [f64; 3] {
    let scaled = |s: f64| p.map(|v| v / s);
    let blocks = lattice(seed, tex, 9, scaled(0.25).map(|v| v.floor() as i64));
    let i = 0.45 * value_noise(seed, tex, 1, scaled(0.12)) + 0.25 * value_noise(seed, tex, 2, scaled(0.04)) + 0.30 * blocks;
    let tint = PALETTE[tex as usize % PALETTE.len()];
    tint.map(|c| 255.0 * c * (0.15 + 0.85 * i))
}

struct World<'a> {
    primitives: &'a [Primitive],
    background_depth: f64,
    seed: u64,
}

impl World<'_> {
    /// Ray parameter and texture of the nearest hit.
    fn cast(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        if d[2] > 1e-12 {
            let t = (self.background_depth - o[2]) / d[2];
            if t > 0.0 {
                best = Some((t, u32::MAX));
            }
        }
        for p in self.primitives {
            if let Some(t) = p.intersect(o, d) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, p.texture()));
                }
            }
        }
        best
    }
}

/// Renders one view. Depth is the camera-frame z of the nearest surface
/// along the pixel-center ray; color averages a 2×2 subpixel grid.
pub fn render_view(
    primitives: &[Primitive],
    background_depth: f64,
    seed: u64,
    pose: &Rigid3<f64>,
    intr: &Intrinsics<f64>,
    width: usize,
    height: usize,
) -> (ColorImage, DepthImage) {
    let world = World {
        primitives,
        background_depth,
        seed,
    };
    let o = pose.translation;
    let r = pose.rotation;
    let ray = |u: f64, v: f64| {
        let c = [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0];
        [0, 1, 2].map(|i| r[i][0] * c[0] + r[i][1] * c[1] + r[i][2] * c[2])
    };
    let color_at = |d: [f64; 3]| match world.cast(o, d) {
        Some((t, tex)) => {
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let tex = if tex == u32::MAX { 0 } else { tex };
            shade(world.seed, tex, p)
        }
        None => [0.0; 3],
    };
    let mut depth = DepthImage::filled(width, height, 0);
    let color = Plane::from_fn(width, height, |x, y| {
        let (u, v) = (x as f64, y as f64);
        if let Some((t, _)) = world.cast(o, ray(u, v)) {
            let mm = (t * 1000.0).round();
            if mm >= 1.0 && mm <= 65535.0 {
                depth.set(x, y, mm as u16);
            }
        }
        let mut acc = [0.0; 3];
        for (du, dv) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
            let c = color_at(ray(u + du, v + dv));
            for k in 0..3 {
                acc[k] += c[k] / 4.0;
            }
        }
        acc.map(|c| c.round().clamp(0.0, 255.0) as u8)
    });
    (color, depth)
}

/// Renders every frame of the trajectory: `(color, ground-truth depth)`.
pub fn render_sequence(spec: &SceneSpec) -> Result<Vec<(ColorImage, DepthImage)>, SynthError> {
    spec.validate()?;
    Ok((0..spec.frame_count()).map(|i| render_frame(spec, i)).collect())
}

pub fn render_frame(spec: &SceneSpec, index: usize) -> (ColorImage, DepthImage) {
    let (prims, bg, seed) = match &spec.cut {
        Some(cut) if index >= cut.at_frame => (&cut.primitives[..], cut.background_depth, cut.texture_seed),
        _ => (&spec.primitives[..], spec.background_depth, spec.seed),
    };
    render_view(
        prims,
        bg,
        seed,
        &spec.trajectory[index],
        &spec.intrinsics,
        spec.width,
        spec.height,
    )
}

/// Zeroes pixels the second camera of a stereo pair (offset `baseline`
/// meters along +x) cannot see. Each valid pixel is warped to column
/// `x − fx·b/z`; a pixel is occluded when some other pixel with a disparity
/// at least one pixel larger (a nearer surface) lands on the same column.
pub fn inject_geometric_holes(gt: &DepthImage, intr: &Intrinsics<f64>, baseline: f64) -> (DepthImage, GrayImage) {
    let (w, h) = gt.dims();
    let mut out = gt.clone();
    let mut mask = GrayImage::filled(w, h, 0);
    if baseline <= 0.0 {
        return (out, mask);
    }
    let mut max_disp = vec![f64::NEG_INFINITY; w];
    let mut target = vec![None; w];
    for y in 0..h {
        max_disp.fill(f64::NEG_INFINITY);
        for (x, &d) in gt.row(y).iter().enumerate() {
            target[x] = None;
            if d == 0 {
                continue;
            }
            let disp = intr.fx * baseline / (d as f64 / 1000.0);
            let c = (x as f64 - disp).round();
            if c >= 0.0 && c < w as f64 {
                let c = c as usize;
                target[x] = Some((c, disp));
                max_disp[c] = max_disp[c].max(disp);
            }
        }
        for x in 0..w {
            if let Some((c, disp)) = target[x] {
                if max_disp[c] - disp >= 1.0 {
                    out.set(x, y, 0);
                    mask.set(x, y, 255);
                }
            }
        }
    }
    (out, mask)
}

/// Zeroes exactly `round(fraction · valid_pixels)` pixels grouped into
/// random discs.
pub fn inject_blob_holes(depth: &DepthImage, fraction: f64, seed: u64, frame: u64) -> (DepthImage, GrayImage) {
    let (w, h) = depth.dims();
    let mut out = depth.clone();
    let mut mask = GrayImage::filled(w, h, 0);
    let target = (fraction.clamp(0.0, 1.0) * depth.count_valid() as f64).round() as usize;
    let radius_max = ((w.min(h) as f64) * 0.08).max(2.0);
    let mut placed = 0usize;
    let mut draw = 0u64;
    let mut next = || {
        draw += 1;
        counter_unit(seed, STREAM_BLOB + (frame << 8), draw)
    };
    while placed < target {
        let cx = next() * w as f64;
        let cy = next() * h as f64;
        let r = 1.0 + next() * radius_max;
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w - 1));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h - 1));
        'disc: for y in y0..=y1 {
            for x in x0..=x1 {
                if placed == target {
                    break 'disc;
                }
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r && out.get(x, y) != 0 {
                    out.set(x, y, 0);
                    mask.set(x, y, 255);
                    placed += 1;
                }
            }
        }
    }
    (out, mask)
}

/// Replaces `round(flicker_fraction · N)` pixels, chosen afresh for every
/// frame, by either a dropout (0) or a depth drawn uniformly from
/// `flicker_range`; every chosen pixel is guaranteed to change.
pub fn inject_flicker(depth: &DepthImage, noise: &NoiseSpec, frame_index: usize) -> DepthImage {
    let n = depth.len();
    let count = (noise.flicker_fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
    let mut out = depth.clone();
    if count == 0 {
        return out;
    }
    let (lo, hi) = (noise.flicker_range[0] as u64, noise.flicker_range[1] as u64);
    let span = hi - lo + 1;
    let mut rng = stream_rng(noise.seed, STREAM_FLICKER + ((frame_index as u64) << 8));
    let pixels = out.as_mut_slice();
    for idx in sample(&mut rng, n, count) {
        let old = pixels[idx] as u64;
        let bits = counter_u64(noise.seed, STREAM_FLICKER + ((frame_index as u64) << 8), idx as u64);
        let new = if bits & 1 == 0 && old != 0 {
            0
        } else {
            let v = (bits >> 1) % span;
            lo + if lo + v == old { (v + 1) % span } else { v }
        };
        pixels[idx] = new as u16;
    }
    out
}

/// `d ← d + d·β` with `β ~ U[−θ, θ]` drawn per pixel; zeros stay zero.
pub fn apply_depth_noise(depth: &DepthImage, theta: f64, seed: u64) -> DepthImage {
    if theta == 0.0 {
        return depth.clone();
    }
    let mut out = depth.clone();
    for (i, d) in out.as_mut_slice().iter_mut().enumerate() {
        if *d == 0 {
            continue;
        }
        let beta = (2.0 * counter_unit(seed, STREAM_DEPTH_NOISE, i as u64) - 1.0) * theta;
        let v = *d as f64;
        *d = (v + v * beta).round().clamp(0.0, 65535.0) as u16;
    }
    out
}

/// One generated frame with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub color: ColorImage,
    pub gt: DepthImage,
    pub depth: DepthImage,
    /// Nonzero where a hole was injected over valid ground truth.
    pub hole_mask: GrayImage,
}

/// Applies holes, multiplicative noise and flicker, in that order.
pub fn corrupt(gt: &DepthImage, intr: &Intrinsics<f64>, noise: &NoiseSpec, frame: usize) -> (DepthImage, GrayImage) {
    let (holed, mask) = match noise.hole_mode {
        HoleMode::Geometric => inject_geometric_holes(gt, intr, intr.baseline.unwrap_or(0.0)),
        HoleMode::Blob => inject_blob_holes(gt, noise.blob_fraction, noise.seed, frame as u64),
        HoleMode::None => (gt.clone(), GrayImage::filled(gt.width(), gt.height(), 0)),
    };
    let noisy = apply_depth_noise(&holed, noise.theta, noise.seed ^ counter_u64(noise.seed, 0, frame as u64));
    (inject_flicker(&noisy, noise, frame), mask)
}

pub fn synthesize_frame(spec: &SceneSpec, noise: &NoiseSpec, index: usize) -> SynthFrame {
    let (color, gt) = render_frame(spec, index);
    let (depth, hole_mask) = corrupt(&gt, &spec.intrinsics, noise, index);
    SynthFrame {
        color,
        gt,
        depth,
        hole_mask,
    }
}

pub fn synthesize(spec: &SceneSpec, noise: &NoiseSpec) -> Result<Vec<SynthFrame>, SynthError> {
    spec.validate()?;
    noise.validate()?;
    Ok((0..spec.frame_count()).map(|i| synthesize_frame(spec, noise, i)).collect())
}

/// Summary of a written dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub mean_hole_ratio: f64,
    pub mean_raw_psnr_db: f64,
}

/// Renders, corrupts and writes a sequence in the dataset layout, with
/// ground truth, hole masks and camera poses.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &SceneSpec, noise: &NoiseSpec) -> Result<SynthSummary, SynthError> {
    spec.validate()?;
    noise.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = SequenceManifest::new(dir, spec.frame_count(), spec.intrinsics);
    manifest.has_ground_truth = true;
    manifest.has_hole_masks = true;
    manifest.poses = Some(spec.trajectory.clone());
    let mut hole_sum = 0.0;
    let mut psnrs = Vec::new();
    for i in 0..spec.frame_count() {
        let f = synthesize_frame(spec, noise, i);
        io::write_color(manifest.path(i, FrameFile::Color), &f.color)?;
        io::write_depth(manifest.path(i, FrameFile::Depth), &f.depth)?;
        io::write_depth(manifest.path(i, FrameFile::GroundTruth), &f.gt)?;
        io::write_gray(manifest.path(i, FrameFile::HoleMask), &f.hole_mask)?;
        hole_sum += crate::metrics::hole_ratio(&f.depth);
        psnrs.push(crate::metrics::psnr(&f.depth, &f.gt).expect("same dims"));
    }
    io::write_manifest(&manifest)?;
    Ok(SynthSummary {
        frames: spec.frame_count(),
        width: spec.width,
        height: spec.height,
        mean_hole_ratio: hole_sum / spec.frame_count() as f64,
        mean_raw_psnr_db: crate::metrics::mean_psnr(psnrs),
    })
}
