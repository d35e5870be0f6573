//! Square-window grayscale filters on depth images: dilation (max),
//! erosion (min) and median. Borders replicate the edge pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::DepthImage;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("window size must be odd and at least 3, got {0}")]
pub struct InvalidWindow(pub usize);

/// Odd square window edge `N ≥ 3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct WindowSize(usize);

impl WindowSize {
    pub fn new(n: usize) -> Result<Self, InvalidWindow> {
        if n >= 3 && n % 2 == 1 {
            Ok(Self(n))
        } else {
            Err(InvalidWindow(n))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn radius(self) -> usize {
        self.0 / 2
    }
}

impl TryFrom<usize> for WindowSize {
    type Error = InvalidWindow;
    fn try_from(n: usize) -> Result<Self, Self::Error> {
        Self::new(n)
    }
}

impl From<WindowSize> for usize {
    fn from(w: WindowSize) -> usize {
        w.0
    }
}

/// Separable running extremum: rows first, then columns. Clamped windows
/// only ever repeat edge pixels, which cannot change a max or min.
fn extremum(img: &DepthImage, n: WindowSize, pick: fn(u16, u16) -> u16) -> DepthImage {
    let (w, h) = img.dims();
    let r = n.radius();
    let mut rows = img.clone();
    for y in 0..h {
        let src = img.row(y);
        let dst = rows.row_mut(y);
        for (x, out) in dst.iter_mut().enumerate() {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            *out = src[lo..=hi].iter().copied().reduce(pick).unwrap();
        }
    }
    let mut out = rows.clone();
    let mut column = vec![0u16; h];
    for x in 0..w {
        for (y, c) in column.iter_mut().enumerate() {
            *c = rows.get(x, y);
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            out.set(x, y, column[lo..=hi].iter().copied().reduce(pick).unwrap());
        }
    }
    out
}

/// Grayscale dilation: each pixel becomes the maximum of its `N×N` window.
/// Invalid zeros lose to any valid neighbor, which is what makes dilation
/// a hole-filling operator on depth.
pub fn dilate_gray(img: &DepthImage, n: WindowSize) -> DepthImage {
    extremum(img, n, u16::max)
}

/// Grayscale erosion: windowed minimum.
pub fn erode_gray(img: &DepthImage, n: WindowSize) -> DepthImage {
    extremum(img, n, u16::min)
}

/// Windowed median over the `N×N` neighborhood with replicated borders, so
/// every window holds an odd `N²` samples.
pub fn median_filter(img: &DepthImage, n: WindowSize) -> DepthImage {
    let (w, h) = img.dims();
    let r = n.radius() as isize;
    let mid = n.get() * n.get() / 2;
    let mut window = Vec::with_capacity(n.get() * n.get());
    DepthImage::from_fn(w, h, |x, y| {
        window.clear();
        for dy in -r..=r {
            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
            let row = img.row(yy);
            for dx in -r..=r {
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                window.push(row[xx]);
            }
        }
        *window.select_nth_unstable(mid).1
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Exhaustive per-window reference implementations.
    use crate::image::DepthImage;

    pub fn window(img: &DepthImage, x: usize, y: usize, n: usize) -> Vec<u16> {
        let r = (n / 2) as isize;
        let mut v = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                v.push(img.get_clamped(x as isize + dx, y as isize + dy));
            }
        }
        v
    }

    pub fn dilate(img: &DepthImage, n: usize) -> DepthImage {
        DepthImage::from_fn(img.width(), img.height(), |x, y| *window(img, x, y, n).iter().max().unwrap())
    }

    pub fn erode(img: &DepthImage, n: usize) -> DepthImage {
        DepthImage::from_fn(img.width(), img.height(), |x, y| *window(img, x, y, n).iter().min().unwrap())
    }

    pub fn median(img: &DepthImage, n: usize) -> DepthImage {
        DepthImage::from_fn(img.width(), img.height(), |x, y| {
            let mut v = window(img, x, y, n);
            v.sort();
            v[v.len() / 2]
        })
    }
}
