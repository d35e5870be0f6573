//! Template-to-frame registration.
//!
//! Both images are converted to gray and shrunk to a small square working
//! resolution, where FAST corners with 256-bit BRIEF descriptors are matched
//! by mutual nearest Hamming distance. A RANSAC affine fit over the matches
//! is mapped back to full resolution. The number of close matches doubles as
//! the epoch controller's signal that the template has gone stale.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Affine2;
use crate::image::{resize_bilinear, resize_scale, to_gray, ColorImage, DepthImage, GrayImage, Plane};
use crate::rng::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("image {0}x{1} is smaller than the 32x32 minimum")]
    ImageTooSmall(usize, usize),
    #[error("{found} usable matches, need {required}")]
    TooFewMatches { found: usize, required: usize },
    #[error("every sampled match triple was degenerate")]
    DegenerateConfiguration,
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Edge of the square working image.
    pub work_size: usize,
    /// FAST segment-test intensity margin.
    pub fast_threshold: u8,
    pub max_features: usize,
    /// A match is good when its Hamming distance is at most this.
    pub match_distance_threshold: u32,
    /// Mutual matches up to this distance take part in the affine fit.
    pub ransac_distance_threshold: u32,
    pub ransac_iterations: usize,
    /// Inlier radius in working-image pixels.
    pub inlier_radius: f64,
    pub min_good_matches_for_affine: usize,
    pub ransac_seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            work_size: 200,
            fast_threshold: 20,
            max_features: 500,
            match_distance_threshold: 20,
            ransac_distance_threshold: 48,
            ransac_iterations: 500,
            inlier_radius: 1.5,
            min_good_matches_for_affine: 3,
            ransac_seed: 0x5EED,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: &str| Err(RegistrationError::InvalidConfig(m.into()));
        if self.work_size < 32 {
            return bad("work_size must be >= 32");
        }
        if self.fast_threshold == 0 || self.match_distance_threshold == 0 || self.max_features == 0 {
            return bad("thresholds and max_features must be > 0");
        }
        if self.ransac_iterations == 0 || !(self.inlier_radius > 0.0) {
            return bad("ransac_iterations and inlier_radius must be > 0");
        }
        if self.min_good_matches_for_affine < 3 {
            return bad("an affine fit needs at least 3 matches");
        }
        Ok(())
    }
}

pub type Descriptor = [u64; 4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feature {
    pub x: f64,
    pub y: f64,
    pub score: u32,
    pub descriptor: Descriptor,
}

#[inline]
pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub good_count: usize,
}

const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];
const ARC: usize = 9;
const PATCH_RADIUS: i32 = 12;
const PATTERN_SEED: u64 = 0xB21E_F00D;

/// Fixed BRIEF test pairs, drawn once from a seeded generator with a
/// Gaussian-like spread clipped to the patch.
fn pattern() -> &'static [[(i8, i8); 2]; 256] {
    static PATTERN: OnceLock<[[(i8, i8); 2]; 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = stream_rng(PATTERN_SEED, 0);
        let mut draw = || {
            // Sum of three uniforms: bell-shaped on [-1.5, 1.5].
            let s: f64 = (0..3).map(|_| rng.random::<f64>() - 0.5).sum();
            (s * PATCH_RADIUS as f64 / 1.5).round().clamp(-(PATCH_RADIUS as f64), PATCH_RADIUS as f64) as i8
        };
        let mut out = [[(0i8, 0i8); 2]; 256];
        for pair in out.iter_mut() {
            loop {
                let p = [(draw(), draw()), (draw(), draw())];
                if p[0] != p[1] {
                    *pair = p;
                    break;
                }
            }
        }
        out
    })
}

/// Separable [1 4 6 4 1]/16 blur with replicated borders.
fn smooth(img: &GrayImage) -> Plane<u16> {
    const K: [u32; 5] = [1, 4, 6, 4, 1];
    let (w, h) = img.dims();
    let horiz = Plane::from_fn(w, h, |x, y| {
        (0..5)
            .map(|k| K[k] * img.get_clamped(x as isize + k as isize - 2, y as isize) as u32)
            .sum::<u32>() as u16
    });
    Plane::from_fn(w, h, |x, y| {
        ((0..5)
            .map(|k| K[k] * horiz.get_clamped(x as isize, y as isize + k as isize - 2) as u32)
            .sum::<u32>()
            / 16) as u16
    })
}

/// FAST-9 score: the larger of the summed excesses of the bright and the
/// dark circle pixels, or 0 when no 9-long contiguous arc passes.
fn fast_score(img: &GrayImage, x: usize, y: usize, t: i32) -> u32 {
    let p = img.get(x, y) as i32;
    let mut ring = [0i32; 16];
    for (k, (dx, dy)) in CIRCLE.iter().enumerate() {
        ring[k] = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as i32;
    }
    // Quick reject on the compass points: a 9-arc covers at least two.
    let compass = [0, 4, 8, 12];
    let bright = compass.iter().filter(|&&k| ring[k] > p + t).count();
    let dark = compass.iter().filter(|&&k| ring[k] < p - t).count();
    if bright < 2 && dark < 2 {
        return 0;
    }
    let has_arc = |pred: &dyn Fn(i32) -> bool| {
        let mut run = 0;
        for k in 0..32 {
            if pred(ring[k % 16]) {
                run += 1;
                if run >= ARC {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        false
    };
    let is_bright = has_arc(&|v| v > p + t);
    let is_dark = !is_bright && has_arc(&|v| v < p - t);
    if !is_bright && !is_dark {
        return 0;
    }
    let sb: i32 = ring.iter().filter(|&&v| v > p + t).map(|&v| v - p - t).sum();
    let sd: i32 = ring.iter().filter(|&&v| v < p - t).map(|&v| p - t - v).sum();
    sb.max(sd) as u32
}

fn describe(smoothed: &Plane<u16>, x: usize, y: usize) -> Descriptor {
    let mut d = [0u64; 4];
    for (bit, [a, b]) in pattern().iter().enumerate() {
        let va = smoothed.get((x as i32 + a.0 as i32) as usize, (y as i32 + a.1 as i32) as usize);
        let vb = smoothed.get((x as i32 + b.0 as i32) as usize, (y as i32 + b.1 as i32) as usize);
        if va < vb {
            d[bit / 64] |= 1 << (bit % 64);
        }
    }
    d
}

/// FAST-9 corners, 3×3 non-maximum suppressed, strongest `max_features`
/// kept, each with a BRIEF descriptor.
pub fn detect_features(img: &GrayImage, cfg: &RegistrationConfig) -> Result<Vec<Feature>, RegistrationError> {
    let (w, h) = img.dims();
    if w < 32 || h < 32 {
        return Err(RegistrationError::ImageTooSmall(w, h));
    }
    let margin = PATCH_RADIUS as usize + 1;
    let t = cfg.fast_threshold as i32;
    let mut score = Plane::filled(w, h, 0u32);
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            score.set(x, y, fast_score(img, x, y, t));
        }
    }
    let mut corners = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let s = score.get(x, y);
            if s == 0 {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let q = score.get((x as i32 + dx) as usize, (y as i32 + dy) as usize);
                    // Ties go to the earlier pixel in raster order.
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if q > s || (q == s && earlier) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                corners.push((s, y, x));
            }
        }
    }
    corners.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    corners.truncate(cfg.max_features);
    let smoothed = smooth(img);
    Ok(corners
        .into_iter()
        .map(|(s, y, x)| Feature {
            x: x as f64,
            y: y as f64,
            score: s,
            descriptor: describe(&smoothed, x, y),
        })
        .collect())
}

fn nearest(d: &Descriptor, pool: &[Feature]) -> Option<(usize, u32)> {
    let mut best: Option<(usize, u32)> = None;
    for (j, f) in pool.iter().enumerate() {
        let dist = hamming(d, &f.descriptor);
        if best.is_none_or(|(_, bd)| dist < bd) {
            best = Some((j, dist));
        }
    }
    best
}

/// Mutual nearest neighbours by Hamming distance, lower index winning ties.
pub fn match_features(a: &[Feature], b: &[Feature], cfg: &RegistrationConfig) -> MatchSet {
    let back: Vec<Option<usize>> = b.iter().map(|f| nearest(&f.descriptor, a).map(|(i, _)| i)).collect();
    let mut pairs = Vec::new();
    for (i, f) in a.iter().enumerate() {
        if let Some((j, distance)) = nearest(&f.descriptor, b) {
            if back[j] == Some(i) {
                pairs.push(Match { a: i, b: j, distance });
            }
        }
    }
    let good_count = pairs.iter().filter(|m| m.distance <= cfg.match_distance_threshold).count();
    MatchSet { pairs, good_count }
}

/// Exact affine map from three correspondences, `None` when the source
/// triangle is (nearly) degenerate.
fn affine_from_three(src: [[f64; 2]; 3], dst: [[f64; 2]; 3]) -> Option<Affine2<f64>> {
    let area = (src[1][0] - src[0][0]) * (src[2][1] - src[0][1]) - (src[2][0] - src[0][0]) * (src[1][1] - src[0][1]);
    if area.abs() < 1.0 {
        return None;
    }
    let m = Matrix3::new(
        src[0][0], src[0][1], 1.0, src[1][0], src[1][1], 1.0, src[2][0], src[2][1], 1.0,
    );
    let inv = m.try_inverse()?;
    let row = |k: usize| inv * Vector3::new(dst[0][k], dst[1][k], dst[2][k]);
    let (r0, r1) = (row(0), row(1));
    Affine2::new([[r0[0], r0[1], r0[2]], [r1[0], r1[1], r1[2]]]).ok()
}

/// Least-squares affine map over the given correspondences.
fn affine_least_squares(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Affine2<f64>> {
    let mut ata = Matrix3::zeros();
    let mut atx = Vector3::zeros();
    let mut aty = Vector3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let v = Vector3::new(s[0], s[1], 1.0);
        ata += v * v.transpose();
        atx += v * d[0];
        aty += v * d[1];
    }
    let chol = ata.cholesky()?;
    let (r0, r1) = (chol.solve(&atx), chol.solve(&aty));
    Affine2::new([[r0[0], r0[1], r0[2]], [r1[0], r1[1], r1[2]]]).ok()
}

fn reprojection_error(m: &Affine2<f64>, s: [f64; 2], d: [f64; 2]) -> f64 {
    let p = m.apply(s);
    ((p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)).sqrt()
}

/// RANSAC over three-match samples followed by a least-squares refit on the
/// inliers. The result maps positions in `a` onto positions in `b`.
pub fn estimate_affine(
    matches: &MatchSet,
    positions_a: &[[f64; 2]],
    positions_b: &[[f64; 2]],
    cfg: &RegistrationConfig,
) -> Result<Affine2<f64>, RegistrationError> {
    let limit = cfg.ransac_distance_threshold.max(cfg.match_distance_threshold);
    let usable: Vec<&Match> = matches.pairs.iter().filter(|m| m.distance <= limit).collect();
    let required = cfg.min_good_matches_for_affine.max(3);
    if matches.good_count < required || usable.len() < 3 {
        return Err(RegistrationError::TooFewMatches {
            found: matches.good_count.min(usable.len()),
            required,
        });
    }
    let src: Vec<[f64; 2]> = usable.iter().map(|m| positions_a[m.a]).collect();
    let dst: Vec<[f64; 2]> = usable.iter().map(|m| positions_b[m.b]).collect();
    let n = src.len();
    let inliers_of = |m: &Affine2<f64>| -> (Vec<usize>, f64) {
        let mut idx = Vec::new();
        let mut err = 0.0;
        for k in 0..n {
            let e = reprojection_error(m, src[k], dst[k]);
            if e <= cfg.inlier_radius {
                idx.push(k);
                err += e;
            }
        }
        (idx, err)
    };

    let mut rng = stream_rng(cfg.ransac_seed, n as u64);
    let mut best: Option<(Affine2<f64>, Vec<usize>, f64)> = None;
    for _ in 0..cfg.ransac_iterations {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let Some(m) = affine_from_three([src[i], src[j], src[k]], [dst[i], dst[j], dst[k]]) else {
            continue;
        };
        let (idx, err) = inliers_of(&m);
        let better = match &best {
            None => true,
            Some((_, bi, be)) => idx.len() > bi.len() || (idx.len() == bi.len() && err < *be),
        };
        if better {
            best = Some((m, idx, err));
        }
        if best.as_ref().is_some_and(|(_, bi, _)| bi.len() == n) {
            break;
        }
    }
    let (mut model, mut inliers, _) = best.ok_or(RegistrationError::DegenerateConfiguration)?;
    for _ in 0..2 {
        let s: Vec<_> = inliers.iter().map(|&k| src[k]).collect();
        let d: Vec<_> = inliers.iter().map(|&k| dst[k]).collect();
        match affine_least_squares(&s, &d) {
            Some(m) => {
                let (idx, _) = inliers_of(&m);
                model = m;
                if idx.len() < 3 || idx == inliers {
                    break;
                }
                inliers = idx;
            }
            None => break,
        }
    }
    Ok(model)
}

/// Features of one image at working resolution plus the scale back to full
/// resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub features: Vec<Feature>,
    pub full_dims: (usize, usize),
    pub scale: [f64; 2],
}

impl PreparedImage {
    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.features.iter().map(|f| [f.x, f.y]).collect()
    }
}

pub fn prepare_image(color: &ColorImage, cfg: &RegistrationConfig) -> Result<PreparedImage, RegistrationError> {
    let (w, h) = color.dims();
    let work = resize_bilinear(&to_gray(color), cfg.work_size, cfg.work_size);
    Ok(PreparedImage {
        features: detect_features(&work, cfg)?,
        full_dims: (w, h),
        scale: [resize_scale(w, cfg.work_size), resize_scale(h, cfg.work_size)],
    })
}

/// `S⁻¹·M·S` with `S = diag(sx, sy)`: a working-resolution map expressed in
/// full-resolution pixels.
pub fn to_full_resolution(m: &Affine2<f64>, scale: [f64; 2]) -> Affine2<f64> {
    let s = scale;
    let w = &m.m;
    Affine2 {
        m: [
            [w[0][0], w[0][1] * s[1] / s[0], w[0][2] / s[0]],
            [w[1][0] * s[0] / s[1], w[1][1], w[1][2] / s[1]],
        ],
    }
}

/// Matches a prepared template against a prepared frame. Falls back to the
/// identity when the fit fails.
pub fn register_prepared(
    template: &PreparedImage,
    frame: &PreparedImage,
    cfg: &RegistrationConfig,
) -> (Affine2<f64>, MatchSet) {
    let matches = match_features(&template.features, &frame.features, cfg);
    let m = estimate_affine(&matches, &template.positions(), &frame.positions(), cfg)
        .map(|m| to_full_resolution(&m, frame.scale))
        .unwrap_or_else(|_| Affine2::identity());
    (m, matches)
}

/// Affine map taking template pixels to frame pixels at full resolution,
/// with the match statistics.
pub fn register_template(
    template: &crate::fusion::Template,
    frame: &crate::io::RgbdFrame,
    cfg: &RegistrationConfig,
) -> (Affine2<f64>, MatchSet) {
    match (prepare_image(&template.reference, cfg), prepare_image(&frame.color, cfg)) {
        (Ok(t), Ok(f)) => register_prepared(&t, &f, cfg),
        _ => (Affine2::identity(), MatchSet::default()),
    }
}

/// Inverse-mapped nearest-neighbour warp: output pixel `p` takes the input
/// sample nearest to `M⁻¹·p`, or 0 outside the input.
pub fn warp_depth(img: &DepthImage, m: &Affine2<f64>, dims: (usize, usize)) -> DepthImage {
    let (w, h) = dims;
    let Ok(inv) = m.inverse() else {
        return DepthImage::filled(w, h, 0);
    };
    let (iw, ih) = (img.width() as f64, img.height() as f64);
    DepthImage::from_fn(w, h, |x, y| {
        let [sx, sy] = inv.apply([x as f64, y as f64]);
        let (rx, ry) = ((sx + 0.5).floor(), (sy + 0.5).floor());
        if rx < 0.0 || ry < 0.0 || rx >= iw || ry >= ih {
            0
        } else {
            img.get(rx as usize, ry as usize)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::counter_unit;
    use proptest::prelude::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> GrayImage {
        // Blocky random texture: corners at block boundaries.
        GrayImage::from_fn(w, h, |x, y| {
            let c = ((y / 4) * 1000 + x / 4) as u64;
            (counter_unit(seed, 9, c) * 255.0) as u8
        })
    }

    fn shifted(img: &GrayImage, dx: i64, dy: i64) -> GrayImage {
        GrayImage::from_fn(img.width(), img.height(), |x, y| {
            img.get_clamped(x as isize - dx as isize, y as isize - dy as isize)
        })
    }

    #[test]
    fn constant_image_has_no_features() {
        let f = detect_features(&GrayImage::filled(64, 64, 128), &RegistrationConfig::default()).unwrap();
        assert!(f.is_empty());
        assert!(matches!(
            detect_features(&GrayImage::filled(31, 64, 0), &RegistrationConfig::default()),
            Err(RegistrationError::ImageTooSmall(31, 64))
        ));
    }

    #[test]
    fn square_corners_are_detected() {
        let img = GrayImage::from_fn(48, 48, |x, y| if (22..27).contains(&x) && (22..27).contains(&y) { 255 } else { 0 });
        let f = detect_features(&img, &RegistrationConfig::default()).unwrap();
        let corners = [(22.0, 22.0), (26.0, 22.0), (22.0, 26.0), (26.0, 26.0)];
        for (cx, cy) in corners {
            assert!(
                f.iter().any(|p| (p.x - cx).abs() <= 1.0 && (p.y - cy).abs() <= 1.0),
                "no corner near ({cx}, {cy}): {f:?}"
            );
        }
    }

    #[test]
    fn feature_cap_is_respected() {
        // FAST does not fire on X-junctions; the board's outer corners do.
        let board = GrayImage::from_fn(120, 120, |x, y| {
            let inside = (20..100).contains(&x) && (20..100).contains(&y);
            match (inside, (x / 10 + y / 10) % 2 == 0) {
                (false, _) => 128,
                (true, true) => 30,
                (true, false) => 220,
            }
        });
        let cfg = RegistrationConfig {
            max_features: 25,
            ..Default::default()
        };
        let f = detect_features(&board, &cfg).unwrap();
        assert!(!f.is_empty() && f.len() <= 25);
    }

    #[test]
    fn self_match_is_perfect() {
        let cfg = RegistrationConfig::default();
        let f = detect_features(&noise_image(120, 120, 1), &cfg).unwrap();
        assert!(f.len() > 20);
        let m = match_features(&f, &f, &cfg);
        assert_eq!(m.pairs.len(), f.len());
        assert_eq!(m.good_count, f.len());
        assert!(m.pairs.iter().all(|p| p.a == p.b && p.distance == 0));
        assert_eq!(match_features(&[], &f, &cfg), MatchSet::default());
    }

    #[test]
    fn distance_21_is_not_good() {
        let cfg = RegistrationConfig::default();
        let mk = |descriptor| Feature {
            x: 0.0,
            y: 0.0,
            score: 1,
            descriptor,
        };
        let a = mk([0; 4]);
        let b = mk([(1u64 << 21) - 1, 0, 0, 0]);
        let c = mk([(1u64 << 20) - 1, 0, 0, 0]);
        assert_eq!(match_features(&[a], &[b], &cfg).good_count, 0);
        assert_eq!(match_features(&[a], &[b], &cfg).pairs[0].distance, 21);
        assert_eq!(match_features(&[a], &[c], &cfg).good_count, 1);
    }

    fn fit_images(a: &GrayImage, b: &GrayImage) -> Affine2<f64> {
        let cfg = RegistrationConfig::default();
        let fa = detect_features(a, &cfg).unwrap();
        let fb = detect_features(b, &cfg).unwrap();
        let m = match_features(&fa, &fb, &cfg);
        let pa: Vec<_> = fa.iter().map(|f| [f.x, f.y]).collect();
        let pb: Vec<_> = fb.iter().map(|f| [f.x, f.y]).collect();
        estimate_affine(&m, &pa, &pb, &cfg).unwrap()
    }

    #[test]
    fn affine_from_identical_images_is_identity() {
        let img = noise_image(160, 160, 2);
        let m = fit_images(&img, &img);
        let id = Affine2::<f64>::identity();
        for r in 0..2 {
            for c in 0..3 {
                assert!((m.m[r][c] - id.m[r][c]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn affine_recovers_image_shift() {
        let img = noise_image(160, 160, 3);
        let m = fit_images(&img, &shifted(&img, 3, 5));
        assert!((m.m[0][2] - 3.0).abs() <= 0.5 && (m.m[1][2] - 5.0).abs() <= 0.5, "{m:?}");
    }

    #[test]
    fn affine_recovers_small_rotation() {
        let img = noise_image(200, 200, 4);
        let truth = Affine2::similarity([100.0, 100.0], 5f64.to_radians(), 1.0, [0.0, 0.0]);
        let inv = truth.inverse().unwrap();
        let rotated = GrayImage::from_fn(200, 200, |x, y| {
            let [sx, sy] = inv.apply([x as f64, y as f64]);
            img.get_clamped(sx.round() as isize, sy.round() as isize)
        });
        let m = fit_images(&img, &rotated);
        for r in 0..2 {
            for c in 0..2 {
                assert!((m.m[r][c] - truth.m[r][c]).abs() <= 0.01, "{m:?} vs {truth:?}");
            }
        }
    }

    #[test]
    fn too_few_matches() {
        let cfg = RegistrationConfig::default();
        let ms = MatchSet {
            pairs: vec![Match { a: 0, b: 0, distance: 0 }, Match { a: 1, b: 1, distance: 0 }],
            good_count: 2,
        };
        let p = vec![[0.0, 0.0], [10.0, 0.0]];
        assert!(matches!(
            estimate_affine(&ms, &p, &p, &cfg),
            Err(RegistrationError::TooFewMatches { .. })
        ));
        let collinear: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let ms = MatchSet {
            pairs: (0..6).map(|i| Match { a: i, b: i, distance: 0 }).collect(),
            good_count: 6,
        };
        assert_eq!(
            estimate_affine(&ms, &collinear, &collinear, &cfg),
            Err(RegistrationError::DegenerateConfiguration)
        );
    }

    #[test]
    fn warp_examples() {
        let img = DepthImage::from_fn(20, 15, |x, y| 1 + (y * 20 + x) as u16);
        assert_eq!(warp_depth(&img, &Affine2::identity(), (20, 15)), img);
        let s = warp_depth(&img, &Affine2::translation(3.0, 5.0), (20, 15));
        for y in 0..15 {
            for x in 0..20 {
                let expect = if x >= 3 && y >= 5 { img.get(x - 3, y - 5) } else { 0 };
                assert_eq!(s.get(x, y), expect);
            }
        }
        let m = Affine2::new([[0.0, -1.0, 14.0], [1.0, 0.0, 0.0]]).unwrap();
        let there = warp_depth(&img, &m, (20, 15));
        let back = warp_depth(&there, &m.inverse().unwrap(), (20, 15));
        let mut differing = 0;
        for y in 1..14 {
            for x in 1..19 {
                if back.get(x, y) != 0 && back.get(x, y) != img.get(x, y) {
                    differing += 1;
                }
            }
        }
        assert_eq!(differing, 0);
    }

    #[test]
    fn full_resolution_conjugation() {
        let work = Affine2::new([[1.0, 0.1, 2.0], [0.05, 1.0, -1.0]]).unwrap();
        let scale = [0.5, 0.25];
        let full = to_full_resolution(&work, scale);
        let p = [40.0, 80.0];
        let wp = work.apply([p[0] * scale[0], p[1] * scale[1]]);
        let fp = full.apply(p);
        assert!((fp[0] * scale[0] - wp[0]).abs() < 1e-9);
        assert!((fp[1] * scale[1] - wp[1]).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in prop::array::uniform4(any::<u64>()), b in prop::array::uniform4(any::<u64>()), c in prop::array::uniform4(any::<u64>())) {
            prop_assert_eq!(hamming(&a, &a), 0);
            prop_assert_eq!(hamming(&a, &b), hamming(&b, &a));
            prop_assert!(hamming(&a, &c) <= hamming(&a, &b) + hamming(&b, &c));
            prop_assert!(hamming(&a, &b) <= 256);
        }
    }
}
