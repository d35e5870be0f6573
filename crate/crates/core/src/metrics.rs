//! Depth quality metrics: PSNR, masked RMSE and hole ratio.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{DepthImage, GrayImage, ImageError};

/// Peak value of a 16-bit depth sample.
pub const DEPTH_PEAK: f64 = 65535.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Dimensions(#[from] ImageError),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("ground truth is required for this metric")]
    RequiresGroundTruth,
}

/// Per-frame quality summary. `psnr_db` is `f64::INFINITY` for identical images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub frame: usize,
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub masked_rmse: Option<f64>,
    pub hole_ratio: f64,
}

pub fn mse(a: &DepthImage, b: &DepthImage) -> Result<f64, MetricError> {
    a.ensure_same_dims(b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (DEPTH_PEAK / mse.sqrt()).log10()
    }
}

/// PSNR over every pixel, invalid ones included, with a 65535 peak.
pub fn psnr(a: &DepthImage, b: &DepthImage) -> Result<f64, MetricError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// RMSE restricted to pixels where `mask` is nonzero.
pub fn masked_rmse(pred: &DepthImage, gt: &DepthImage, mask: &GrayImage) -> Result<f64, MetricError> {
    let (sum, n) = masked_sq_error(pred, gt, mask)?;
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok((sum / n as f64).sqrt())
}

/// Sum of squared errors and pixel count under `mask`, for pooling across frames.
pub fn masked_sq_error(pred: &DepthImage, gt: &DepthImage, mask: &GrayImage) -> Result<(f64, usize), MetricError> {
    pred.ensure_same_dims(gt)?;
    pred.ensure_same_dims(mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&p, &g), &m) in pred.as_slice().iter().zip(gt.as_slice()).zip(mask.as_slice()) {
        if m != 0 {
            let d = p as f64 - g as f64;
            sum += d * d;
            n += 1;
        }
    }
    Ok((sum, n))
}

pub fn hole_ratio(img: &DepthImage) -> f64 {
    (img.len() - img.count_valid()) as f64 / img.len() as f64
}

pub fn quality_record(
    frame: usize,
    pred: &DepthImage,
    gt: &DepthImage,
    mask: Option<&GrayImage>,
) -> Result<QualityRecord, MetricError> {
    let masked = match mask {
        Some(m) => match masked_rmse(pred, gt, m) {
            Ok(v) => Some(v),
            Err(MetricError::EmptyMask) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(QualityRecord {
        frame,
        psnr_db: psnr(pred, gt)?,
        masked_rmse: masked,
        hole_ratio: hole_ratio(pred),
    })
}

/// Mean of the finite PSNR values; `+∞` when every value is infinite and
/// `NaN` for an empty input.
pub fn mean_psnr(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut any = false;
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        any = true;
        if v.is_finite() {
            sum += v;
            n += 1;
        }
    }
    match (any, n) {
        (false, _) => f64::NAN,
        (true, 0) => f64::INFINITY,
        _ => sum / n as f64,
    }
}

/// Formats a PSNR for CSV output; infinity becomes `inf`.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Serde adapter writing non-finite decibel values as `"inf"`, `"-inf"`
/// or `"nan"`, since JSON numbers cannot hold them.
pub mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a decibel value: {other}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoleBucket {
    /// Bucket center, as a hole fraction.
    pub hole_ratio: f64,
    pub frames: usize,
    #[serde(with = "psnr_serde")]
    pub mean_psnr_db: f64,
}

/// Groups `(raw, ground truth)` pairs by hole ratio rounded to the nearest
/// multiple of `bucket_width` and reports the mean raw PSNR of each bucket,
/// in increasing ratio order.
pub fn hole_psnr_curve<'a>(
    frames: impl IntoIterator<Item = (&'a DepthImage, Option<&'a DepthImage>)>,
    bucket_width: f64,
) -> Result<Vec<HoleBucket>, MetricError> {
    let mut buckets: std::collections::BTreeMap<i64, Vec<f64>> = Default::default();
    for (raw, gt) in frames {
        let gt = gt.ok_or(MetricError::RequiresGroundTruth)?;
        let key = (hole_ratio(raw) / bucket_width).round() as i64;
        buckets.entry(key).or_default().push(psnr(raw, gt)?);
    }
    Ok(buckets
        .into_iter()
        .map(|(k, v)| HoleBucket {
            hole_ratio: k as f64 * bucket_width,
            frames: v.len(),
            mean_psnr_db: mean_psnr(v.iter().copied()),
        })
        .collect())
}
