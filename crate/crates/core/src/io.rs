//! On-disk sequence layout.
//!
//! ```text
//! root/
//!   manifest.json
//!   frame_000000.color.png   8-bit RGB
//!   frame_000000.depth.png   16-bit gray, millimeters
//!   frame_000000.gt.png      optional ground-truth depth
//!   frame_000000.mask.png    optional occlusion mask, nonzero = hole
//! ```

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb as ImgRgb};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::geometry::{Intrinsics, Rigid3};
use crate::image::{resize_bilinear, ColorImage, DepthImage, GrayImage, Plane};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Default frame spacing when the manifest does not give one (30 Hz).
pub const DEFAULT_FRAME_INTERVAL_MS: f64 = 1000.0 / 30.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no {MANIFEST_FILE} in {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest field `{0}`")]
    MalformedManifest(String),
    #[error("frame {index} is missing file {path}")]
    MissingFrameFile { index: usize, path: PathBuf },
    #[error("frame index {index} out of range (sequence has {count} frames)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("cannot decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV header mismatch in {path}: file has {existing:?}, record has {given:?}")]
    HeaderMismatch {
        path: PathBuf,
        existing: Vec<String>,
        given: Vec<String>,
    },
    #[error("CSV error on {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn frame_stem(index: usize) -> String {
    format!("frame_{index:06}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFile {
    Color,
    Depth,
    GroundTruth,
    HoleMask,
}

impl FrameFile {
    fn suffix(self) -> &'static str {
        match self {
            FrameFile::Color => "color.png",
            FrameFile::Depth => "depth.png",
            FrameFile::GroundTruth => "gt.png",
            FrameFile::HoleMask => "mask.png",
        }
    }
}

/// Validated description of a sequence directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceManifest {
    pub root: PathBuf,
    pub intrinsics: Intrinsics<f64>,
    pub stems: Vec<String>,
    pub has_ground_truth: bool,
    pub has_hole_masks: bool,
    pub frame_interval_ms: f64,
    /// Camera-to-world poses, when the generator knows them.
    pub poses: Option<Vec<Rigid3<f64>>>,
}

impl SequenceManifest {
    pub fn new(root: impl Into<PathBuf>, frames: usize, intrinsics: Intrinsics<f64>) -> Self {
        Self {
            root: root.into(),
            intrinsics,
            stems: (0..frames).map(frame_stem).collect(),
            has_ground_truth: false,
            has_hole_masks: false,
            frame_interval_ms: DEFAULT_FRAME_INTERVAL_MS,
            poses: None,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.stems.len()
    }

    pub fn path(&self, index: usize, which: FrameFile) -> PathBuf {
        self.root.join(format!("{}.{}", self.stems[index], which.suffix()))
    }

    fn check_index(&self, index: usize) -> Result<(), DatasetError> {
        if index >= self.frame_count() {
            return Err(DatasetError::IndexOutOfRange {
                index,
                count: self.frame_count(),
            });
        }
        Ok(())
    }

    fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("frames".into(), json!(self.frame_count()));
        m.insert("fx".into(), json!(self.intrinsics.fx));
        m.insert("fy".into(), json!(self.intrinsics.fy));
        m.insert("cx".into(), json!(self.intrinsics.cx));
        m.insert("cy".into(), json!(self.intrinsics.cy));
        m.insert("baseline_m".into(), json!(self.intrinsics.baseline));
        m.insert("ground_truth".into(), json!(self.has_ground_truth));
        m.insert("hole_masks".into(), json!(self.has_hole_masks));
        m.insert("frame_interval_ms".into(), json!(self.frame_interval_ms));
        if self.stems.iter().enumerate().any(|(i, s)| *s != frame_stem(i)) {
            m.insert("stems".into(), json!(self.stems));
        }
        if let Some(poses) = &self.poses {
            m.insert("poses".into(), serde_json::to_value(poses).expect("poses serialize"));
        }
        Value::Object(m)
    }
}

/// A color + depth pair sharing dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub index: usize,
    pub color: ColorImage,
    pub depth: DepthImage,
    pub timestamp_ms: f64,
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value, DatasetError> {
    obj.get(key).ok_or_else(|| DatasetError::MalformedManifest(key.to_string()))
}

fn f64_field(obj: &Map<String, Value>, key: &str) -> Result<f64, DatasetError> {
    field(obj, key)?
        .as_f64()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DatasetError::MalformedManifest(key.to_string()))
}

fn bool_field(obj: &Map<String, Value>, key: &str) -> Result<bool, DatasetError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(false),
        Some(v) => v.as_bool().ok_or_else(|| DatasetError::MalformedManifest(key.to_string())),
    }
}

/// Reads and validates `manifest.json` under `path`.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<SequenceManifest, DatasetError> {
    let root = path.as_ref();
    let mpath = root.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(DatasetError::MissingManifest(root.to_path_buf()));
    }
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|_| DatasetError::MalformedManifest("<document>".into()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| DatasetError::MalformedManifest("<document>".into()))?;

    let frames = field(obj, "frames")?
        .as_u64()
        .filter(|&n| n >= 1)
        .ok_or_else(|| DatasetError::MalformedManifest("frames".into()))? as usize;
    let mut intrinsics = Intrinsics::new(
        f64_field(obj, "fx")?,
        f64_field(obj, "fy")?,
        f64_field(obj, "cx")?,
        f64_field(obj, "cy")?,
    );
    if intrinsics.fx <= 0.0 {
        return Err(DatasetError::MalformedManifest("fx".into()));
    }
    if intrinsics.fy <= 0.0 {
        return Err(DatasetError::MalformedManifest("fy".into()));
    }
    intrinsics.baseline = match obj.get("baseline_m") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or_else(|| DatasetError::MalformedManifest("baseline_m".into()))?),
    };
    let stems = match obj.get("stems") {
        None | Some(Value::Null) => (0..frames).map(frame_stem).collect(),
        Some(v) => {
            let stems: Vec<String> =
                serde_json::from_value(v.clone()).map_err(|_| DatasetError::MalformedManifest("stems".into()))?;
            if stems.len() != frames {
                return Err(DatasetError::MalformedManifest("stems".into()));
            }
            stems
        }
    };
    let poses = match obj.get("poses") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let poses: Vec<Rigid3<f64>> =
                serde_json::from_value(v.clone()).map_err(|_| DatasetError::MalformedManifest("poses".into()))?;
            if poses.len() != frames || !poses.iter().all(Rigid3::is_valid) {
                return Err(DatasetError::MalformedManifest("poses".into()));
            }
            Some(poses)
        }
    };
    let frame_interval_ms = match obj.get("frame_interval_ms") {
        None | Some(Value::Null) => DEFAULT_FRAME_INTERVAL_MS,
        Some(v) => v
            .as_f64()
            .filter(|v| *v > 0.0)
            .ok_or_else(|| DatasetError::MalformedManifest("frame_interval_ms".into()))?,
    };
    let manifest = SequenceManifest {
        root: root.to_path_buf(),
        intrinsics,
        stems,
        has_ground_truth: bool_field(obj, "ground_truth")?,
        has_hole_masks: bool_field(obj, "hole_masks")?,
        frame_interval_ms,
        poses,
    };

    for index in 0..frames {
        let mut required = vec![FrameFile::Color, FrameFile::Depth];
        if manifest.has_ground_truth {
            required.push(FrameFile::GroundTruth);
        }
        if manifest.has_hole_masks {
            required.push(FrameFile::HoleMask);
        }
        for which in required {
            let path = manifest.path(index, which);
            if !path.is_file() {
                return Err(DatasetError::MissingFrameFile { index, path });
            }
        }
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &SequenceManifest) -> Result<(), DatasetError> {
    let path = manifest.root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest.to_json()).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

fn decode_err(path: &Path, reason: impl ToString) -> DatasetError {
    DatasetError::DecodeError {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    let reader = image::ImageReader::open(path).map_err(io_err(path))?;
    let reader = reader.with_guessed_format().map_err(io_err(path))?;
    reader.decode().map_err(|e| decode_err(path, e))
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthImage, DatasetError> {
    let path = path.as_ref();
    match open_image(path)? {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Plane::new(w as usize, h as usize, buf.into_raw()).map_err(|e| decode_err(path, e))
        }
        other => Err(decode_err(
            path,
            format!("expected 16-bit grayscale, found {:?}", other.color()),
        )),
    }
}

pub fn read_color(path: impl AsRef<Path>) -> Result<ColorImage, DatasetError> {
    let path = path.as_ref();
    let buf = open_image(path)?.to_rgb8();
    let (w, h) = buf.dimensions();
    let pixels = buf.pixels().map(|p| p.0).collect();
    Plane::new(w as usize, h as usize, pixels).map_err(|e| decode_err(path, e))
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage, DatasetError> {
    let path = path.as_ref();
    let buf = open_image(path)?.to_luma8();
    let (w, h) = buf.dimensions();
    Plane::new(w as usize, h as usize, buf.into_raw()).map_err(|e| decode_err(path, e))
}

fn save<P, C>(path: &Path, buf: ImageBuffer<P, C>) -> Result<(), DatasetError>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DatasetError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    })
}

pub fn write_depth(path: impl AsRef<Path>, img: &DepthImage) -> Result<(), DatasetError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.as_slice().to_vec())
            .expect("buffer matches dimensions");
    save(path.as_ref(), buf)
}

pub fn write_color(path: impl AsRef<Path>, img: &ColorImage) -> Result<(), DatasetError> {
    let raw: Vec<u8> = img.as_slice().iter().flatten().copied().collect();
    let buf: ImageBuffer<ImgRgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer matches dimensions");
    save(path.as_ref(), buf)
}

pub fn write_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<(), DatasetError> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.as_slice().to_vec())
            .expect("buffer matches dimensions");
    save(path.as_ref(), buf)
}

/// Decodes frame `index`. Color is resampled to the depth dimensions when
/// they differ.
pub fn read_frame(manifest: &SequenceManifest, index: usize) -> Result<RgbdFrame, DatasetError> {
    manifest.check_index(index)?;
    let depth = read_depth(manifest.path(index, FrameFile::Depth))?;
    let mut color = read_color(manifest.path(index, FrameFile::Color))?;
    if color.dims() != depth.dims() {
        color = resize_bilinear(&color, depth.width(), depth.height());
    }
    Ok(RgbdFrame {
        index,
        color,
        depth,
        timestamp_ms: index as f64 * manifest.frame_interval_ms,
    })
}

pub fn read_ground_truth(manifest: &SequenceManifest, index: usize) -> Result<Option<DepthImage>, DatasetError> {
    manifest.check_index(index)?;
    if !manifest.has_ground_truth {
        return Ok(None);
    }
    read_depth(manifest.path(index, FrameFile::GroundTruth)).map(Some)
}

pub fn read_hole_mask(manifest: &SequenceManifest, index: usize) -> Result<Option<GrayImage>, DatasetError> {
    manifest.check_index(index)?;
    if !manifest.has_hole_masks {
        return Ok(None);
    }
    read_gray(manifest.path(index, FrameFile::HoleMask)).map(Some)
}

/// Ordered `name → value` pairs forming one CSV row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord(pub Vec<(String, String)>);

impl MetricsRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    pub fn keys(&self) -> Vec<String> {
        self.0.iter().map(|(k, _)| k.clone()).collect()
    }
}

/// Appends one row, writing the header first when the file is new or empty.
pub fn append_metrics(path: impl AsRef<Path>, record: &MetricsRecord) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| DatasetError::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let keys = record.keys();
    let existing_len = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
    if existing_len > 0 {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
        let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header != keys {
            return Err(DatasetError::HeaderMismatch {
                path: path.to_path_buf(),
                existing: header,
                given: keys,
            });
        }
    }
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if existing_len == 0 {
        w.write_record(&keys).map_err(csv_err)?;
    }
    w.write_record(record.0.iter().map(|(_, v)| v)).map_err(csv_err)?;
    w.flush().map_err(io_err(path))
}
