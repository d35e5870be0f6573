//! Dense row-major image planes: 16-bit depth, 8-bit gray and 8-bit RGB.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {0}x{1}")]
    EmptyDimensions(usize, usize),
    #[error("sample count {got} does not match {width}x{height}")]
    SampleCount { width: usize, height: usize, got: usize },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
}

/// A dense `width × height` grid of pixels stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Plane<P> {
    width: usize,
    height: usize,
    data: Vec<P>,
}

pub type Rgb = [u8; 3];

/// Depth in millimeters; `0` marks an invalid sample.
pub type DepthImage = Plane<u16>;
pub type GrayImage = Plane<u8>;
pub type ColorImage = Plane<Rgb>;

impl<P: Copy> Plane<P> {
    pub fn new(width: usize, height: usize, data: Vec<P>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions(width, height));
        }
        if data.len() != width * height {
            return Err(ImageError::SampleCount {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Panics on zero dimensions.
    pub fn filled(width: usize, height: usize, value: P) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    /// Reads with coordinates clamped into the image (replicated border).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> P {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: P) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[P] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, y: usize) -> &mut [P] {
        &mut self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[P] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<P> {
        self.data
    }

    pub fn map<Q: Copy>(&self, f: impl Fn(P) -> Q) -> Plane<Q> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn ensure_same_dims<Q: Copy>(&self, other: &Plane<Q>) -> Result<(), ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::DimensionMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }
}

impl DepthImage {
    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&d| d != 0).count()
    }

    pub fn valid_ratio(&self) -> f64 {
        self.count_valid() as f64 / self.len() as f64
    }
}

/// Pixel types that can be bilinearly resampled channel by channel.
pub trait Pixel: Copy {
    const CHANNELS: usize;
    fn channel(&self, c: usize) -> f64;
    /// Builds a pixel from per-channel values, rounding and saturating.
    fn from_channels(f: impl Fn(usize) -> f64) -> Self;
}

impl Pixel for u8 {
    const CHANNELS: usize = 1;
    fn channel(&self, _: usize) -> f64 {
        *self as f64
    }
    fn from_channels(f: impl Fn(usize) -> f64) -> Self {
        f(0).round().clamp(0.0, 255.0) as u8
    }
}

impl Pixel for u16 {
    const CHANNELS: usize = 1;
    fn channel(&self, _: usize) -> f64 {
        *self as f64
    }
    fn from_channels(f: impl Fn(usize) -> f64) -> Self {
        f(0).round().clamp(0.0, 65535.0) as u16
    }
}

impl Pixel for f32 {
    const CHANNELS: usize = 1;
    fn channel(&self, _: usize) -> f64 {
        *self as f64
    }
    fn from_channels(f: impl Fn(usize) -> f64) -> Self {
        f(0) as f32
    }
}

impl Pixel for Rgb {
    const CHANNELS: usize = 3;
    fn channel(&self, c: usize) -> f64 {
        self[c] as f64
    }
    fn from_channels(f: impl Fn(usize) -> f64) -> Self {
        [0, 1, 2].map(|c| f(c).round().clamp(0.0, 255.0) as u8)
    }
}

/// Source coordinate sampled by output index `i` of an axis resized from
/// `src` to `dst` samples, endpoints aligned.
#[inline]
pub fn resize_source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

/// Scale factor `dst_coord = src_coord · s` of the endpoint-aligned convention.
#[inline]
pub fn resize_scale(src: usize, dst: usize) -> f64 {
    if src <= 1 || dst <= 1 {
        1.0
    } else {
        (dst as f64 - 1.0) / (src as f64 - 1.0)
    }
}

/// Bilinear resize with the endpoint-aligned convention: output index `i`
/// samples source coordinate `i·(w−1)/(new_w−1)`, so corner pixels map onto
/// corner pixels. A single-pixel output axis samples the source center; a
/// single-pixel source axis is replicated.
pub fn resize_bilinear<P: Pixel>(img: &Plane<P>, new_w: usize, new_h: usize) -> Plane<P> {
    assert!(new_w >= 1 && new_h >= 1, "target size must be at least 1x1");
    if img.dims() == (new_w, new_h) {
        return img.clone();
    }
    let (w, h) = img.dims();
    let xs: Vec<(usize, usize, f64)> = (0..new_w)
        .map(|i| {
            let sx = resize_source_coord(i, w, new_w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            (x0, x1, sx - x0 as f64)
        })
        .collect();
    Plane::from_fn(new_w, new_h, |i, j| {
        let sy = resize_source_coord(j, h, new_h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        let (x0, x1, fx) = xs[i];
        let (p00, p10, p01, p11) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
        P::from_channels(|c| {
            let top = p00.channel(c) * (1.0 - fx) + p10.channel(c) * fx;
            let bottom = p01.channel(c) * (1.0 - fx) + p11.channel(c) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    })
}

/// ITU-R BT.601 luma, rounded to nearest.
pub fn to_gray(img: &ColorImage) -> GrayImage {
    img.map(|[r, g, b]| ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8)
}
