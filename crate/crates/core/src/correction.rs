//! Frame correction: validity-rule merge of the warped template into the
//! raw frame, then a median filter against flicker. Also the left-fill
//! baseline used by common depth cameras.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Template;
use crate::geometry::Affine2;
use crate::image::{DepthImage, ImageError};
use crate::io::RgbdFrame;
pub use crate::morphology::median_filter;
use crate::morphology::WindowSize;
use crate::registration::{register_template, warp_depth, MatchSet, RegistrationConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectionError {
    #[error(transparent)]
    DimensionMismatch(#[from] ImageError),
    #[error("invalid correction config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub median_window: WindowSize,
    /// A frame sample below this fraction of the template is invalid.
    pub invalid_low_factor: f64,
    /// A frame sample farther than the template is invalid.
    pub treat_greater_as_invalid: bool,
    /// Relative tolerance ε for the greater-than rule: only samples beyond
    /// `template·(1+ε)` are replaced. 0 is the literal rule.
    pub greater_tolerance: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            median_window: WindowSize::new(5).unwrap(),
            invalid_low_factor: 0.5,
            treat_greater_as_invalid: true,
            greater_tolerance: 0.0,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<(), CorrectionError> {
        if !(self.invalid_low_factor > 0.0 && self.invalid_low_factor < 1.0) {
            return Err(CorrectionError::InvalidConfig("invalid_low_factor must lie in (0, 1)".into()));
        }
        if !(self.greater_tolerance >= 0.0 && self.greater_tolerance.is_finite()) {
            return Err(CorrectionError::InvalidConfig("greater_tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per pixel: a frame sample is invalid when it is below
/// `invalid_low_factor × template` or (optionally) above the template;
/// invalid samples take the template value. Template zeros carry no
/// information and never overwrite.
pub fn combine(frame: &DepthImage, warped_template: &DepthImage, cfg: &CorrectionConfig) -> Result<DepthImage, CorrectionError> {
    frame.ensure_same_dims(warped_template)?;
    let low = cfg.invalid_low_factor;
    let high = 1.0 + cfg.greater_tolerance;
    let mut out = frame.clone();
    for (o, &t) in out.as_mut_slice().iter_mut().zip(warped_template.as_slice()) {
        if t == 0 {
            continue;
        }
        let (f, tv) = (*o as f64, t as f64);
        let invalid = f < low * tv || (cfg.treat_greater_as_invalid && f > tv * high);
        if invalid {
            *o = t;
        }
    }
    Ok(out)
}

/// Replaces each zero by the nearest valid sample to its left; zeros before
/// the first valid sample take that sample. All-zero rows stay zero.
pub fn left_fill(img: &DepthImage) -> DepthImage {
    let mut out = img.clone();
    for y in 0..out.height() {
        let row = out.row_mut(y);
        let Some(first) = row.iter().position(|&v| v != 0) else {
            continue;
        };
        let lead = row[first];
        row[..first].fill(lead);
        let mut last = lead;
        for v in row[first..].iter_mut() {
            if *v == 0 {
                *v = last;
            } else {
                last = *v;
            }
        }
    }
    out
}

/// warp → combine → median, given an already estimated template map.
pub fn apply_correction(
    frame: &DepthImage,
    template: &DepthImage,
    m: &Affine2<f64>,
    cfg: &CorrectionConfig,
) -> Result<DepthImage, CorrectionError> {
    let warped = warp_depth(template, m, frame.dims());
    Ok(median_filter(&combine(frame, &warped, cfg)?, cfg.median_window))
}

/// register → warp → combine → median.
pub fn correct_frame(
    frame: &RgbdFrame,
    template: &Template,
    regcfg: &RegistrationConfig,
    corrcfg: &CorrectionConfig,
) -> Result<(DepthImage, MatchSet), CorrectionError> {
    let (m, matches) = register_template(template, frame, regcfg);
    Ok((apply_correction(&frame.depth, &template.image, &m, corrcfg)?, matches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(v: u16) -> DepthImage {
        DepthImage::filled(1, 1, v)
    }

    #[test]
    fn combine_examples() {
        let cfg = CorrectionConfig::default();
        let c = |f, t| combine(&px(f), &px(t), &cfg).unwrap().get(0, 0);
        assert_eq!(c(0, 1000), 1000);
        assert_eq!(c(1000, 1000), 1000);
        assert_eq!(c(1200, 1000), 1000);
        assert_eq!(c(499, 1000), 1000);
        assert_eq!(c(500, 1000), 500);
        assert_eq!(c(700, 0), 700);
        let lenient = CorrectionConfig {
            greater_tolerance: 0.25,
            ..cfg.clone()
        };
        assert_eq!(combine(&px(1200), &px(1000), &lenient).unwrap().get(0, 0), 1200);
        let off = CorrectionConfig {
            treat_greater_as_invalid: false,
            ..cfg
        };
        assert_eq!(combine(&px(1200), &px(1000), &off).unwrap().get(0, 0), 1200);
        assert!(combine(&px(1), &DepthImage::filled(2, 1, 1), &CorrectionConfig::default()).is_err());
    }

    #[test]
    fn left_fill_examples() {
        let row = |v: &[u16]| left_fill(&DepthImage::new(v.len(), 1, v.to_vec()).unwrap()).into_vec();
        assert_eq!(row(&[5, 0, 0, 7]), vec![5, 5, 5, 7]);
        assert_eq!(row(&[0, 0, 9]), vec![9, 9, 9]);
        assert_eq!(row(&[0, 0, 0]), vec![0, 0, 0]);
    }

    #[test]
    fn perfect_template_fills_injected_holes() {
        let gt = DepthImage::from_fn(60, 40, |x, y| 1500 + (x * 3 + y) as u16);
        let mut holed = gt.clone();
        for i in 0..holed.len() {
            if crate::rng::counter_u64(4, 0, i as u64) % 20 == 0 {
                holed.as_mut_slice()[i] = 0;
            }
        }
        let out = apply_correction(&holed, &gt, &Affine2::identity(), &CorrectionConfig::default()).unwrap();
        assert_eq!(out.count_valid(), out.len());
        assert!(crate::metrics::psnr(&out, &gt).unwrap() >= crate::metrics::psnr(&holed, &gt).unwrap());
    }

    fn arb_pair() -> impl Strategy<Value = (DepthImage, DepthImage)> {
        (1usize..=12, 1usize..=12).prop_flat_map(|(w, h)| {
            let px = prop_oneof![Just(0u16), any::<u16>(), 900u16..1100];
            (prop::collection::vec(px.clone(), w * h), prop::collection::vec(px, w * h)).prop_map(move |(a, b)| {
                (DepthImage::new(w, h, a).unwrap(), DepthImage::new(w, h, b).unwrap())
            })
        })
    }

    proptest! {
        #[test]
        fn combine_never_creates_holes((f, t) in arb_pair(), eps in prop_oneof![Just(0.0), 0.0..0.5f64]) {
            let cfg = CorrectionConfig { greater_tolerance: eps, ..Default::default() };
            let c = combine(&f, &t, &cfg).unwrap();
            for i in 0..c.len() {
                if f.as_slice()[i] != 0 || t.as_slice()[i] != 0 {
                    prop_assert_ne!(c.as_slice()[i], 0);
                }
            }
        }

        #[test]
        fn combine_is_idempotent((f, t) in arb_pair()) {
            let cfg = CorrectionConfig::default();
            let once = combine(&f, &t, &cfg).unwrap();
            prop_assert_eq!(combine(&once, &t, &cfg).unwrap(), once);
        }
    }
}
