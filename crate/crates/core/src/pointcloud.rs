//! Depth image ↔ point cloud ↔ Boolean voxel grid conversions.
//!
//! Voxel indices follow the voxelization kernel: lateral axes are centered
//! on the optical axis (`i = ⌊x/vx⌋ + G/2`), depth starts at the camera
//! (`k = ⌊z/vz⌋`). Reprojection uses voxel centers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Point3, Rigid3};
use crate::image::DepthImage;
use crate::scalar::Real;

/// Largest grid edge whose packed index fits in 63 bits.
pub const MAX_GRID_SIZE: u32 = 1 << 21;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointCloudError {
    #[error("voxel grid specs differ: {0:?} vs {1:?}")]
    SpecMismatch(VoxelGridSpec, VoxelGridSpec),
    #[error("invalid voxel grid spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud<T> {
    pub points: Vec<Point3<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &Rigid3<T>) -> Self {
        Self {
            points: self.points.iter().map(|&p| t.apply(p)).collect(),
        }
    }
}

/// One point per nonzero depth pixel: `x = (u−cx)·z/fx`, `y = (v−cy)·z/fy`,
/// `z = depth_mm / 1000`.
pub fn depth_to_points<T: Real>(depth: &DepthImage, intr: &Intrinsics<T>) -> PointCloud<T> {
    let mut points = Vec::with_capacity(depth.count_valid());
    let mm = T::lit(1e-3);
    for v in 0..depth.height() {
        for (u, &d) in depth.row(v).iter().enumerate() {
            if d != 0 {
                let z = T::lit(d as f64) * mm;
                points.push(intr.unproject(T::lit(u as f64), T::lit(v as f64), z));
            }
        }
    }
    PointCloud { points }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    /// Voxels per axis.
    pub grid_size: u32,
    /// Voxel edge lengths (x, y, z) in meters.
    pub voxel_size: [f64; 3],
}

impl Default for VoxelGridSpec {
    fn default() -> Self {
        Self {
            grid_size: 256,
            voxel_size: [0.05; 3],
        }
    }
}

impl VoxelGridSpec {
    pub fn isotropic(grid_size: u32, voxel: f64) -> Self {
        Self {
            grid_size,
            voxel_size: [voxel; 3],
        }
    }

    pub fn validate(&self) -> Result<(), PointCloudError> {
        if self.grid_size < 2 || self.grid_size > MAX_GRID_SIZE {
            return Err(PointCloudError::InvalidSpec(format!(
                "grid_size {} outside [2, {MAX_GRID_SIZE}]",
                self.grid_size
            )));
        }
        if !self.voxel_size.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(PointCloudError::InvalidSpec(format!(
                "voxel sizes must be positive, got {:?}",
                self.voxel_size
            )));
        }
        Ok(())
    }

    #[inline]
    fn half(&self) -> i64 {
        (self.grid_size / 2) as i64
    }

    /// Voxel index of a camera-space point, or `None` outside the grid.
    #[inline]
    pub fn index_of(&self, x: f64, y: f64, z: f64) -> Option<[u32; 3]> {
        let g = self.grid_size as i64;
        let [vx, vy, vz] = self.voxel_size;
        let fx = (x / vx).floor();
        let fy = (y / vy).floor();
        let fz = (z / vz).floor();
        if !(fx.is_finite() && fy.is_finite() && fz.is_finite()) {
            return None;
        }
        let i = fx as i64 + self.half();
        let j = fy as i64 + self.half();
        let k = fz as i64;
        ((0..g).contains(&i) && (0..g).contains(&j) && (0..g).contains(&k)).then_some([i as u32, j as u32, k as u32])
    }

    /// Camera-space center of voxel `(i, j, k)`.
    #[inline]
    pub fn center(&self, idx: [u32; 3]) -> [f64; 3] {
        let h = self.half();
        let [vx, vy, vz] = self.voxel_size;
        [
            (idx[0] as i64 - h) as f64 * vx + 0.5 * vx,
            (idx[1] as i64 - h) as f64 * vy + 0.5 * vy,
            (idx[2] as f64 + 0.5) * vz,
        ]
    }

    #[inline]
    fn pack(&self, idx: [u32; 3]) -> u64 {
        let g = self.grid_size as u64;
        (idx[0] as u64 * g + idx[1] as u64) * g + idx[2] as u64
    }

    #[inline]
    fn unpack(&self, key: u64) -> [u32; 3] {
        let g = self.grid_size as u64;
        [(key / (g * g)) as u32, ((key / g) % g) as u32, (key % g) as u32]
    }
}

/// Sparse Boolean occupancy grid. Occupied cells are kept as a sorted,
/// duplicate-free list of packed indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    spec: VoxelGridSpec,
    keys: Vec<u64>,
}

impl Eq for VoxelGridSpec {}

impl VoxelGrid {
    pub fn empty(spec: VoxelGridSpec) -> Self {
        Self { spec, keys: Vec::new() }
    }

    /// Builds a grid from indices; out-of-range indices are dropped.
    pub fn from_indices(spec: VoxelGridSpec, indices: impl IntoIterator<Item = [u32; 3]>) -> Self {
        let g = spec.grid_size;
        let keys = indices
            .into_iter()
            .filter(|idx| idx.iter().all(|&c| c < g))
            .map(|idx| spec.pack(idx))
            .collect();
        Self::from_unsorted(spec, keys)
    }

    fn from_unsorted(spec: VoxelGridSpec, mut keys: Vec<u64>) -> Self {
        keys.sort_unstable();
        keys.dedup();
        Self { spec, keys }
    }

    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, idx: [u32; 3]) -> bool {
        idx.iter().all(|&c| c < self.spec.grid_size) && self.keys.binary_search(&self.spec.pack(idx)).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = [u32; 3]> + '_ {
        self.keys.iter().map(|&k| self.spec.unpack(k))
    }

    pub fn is_subset_of(&self, other: &VoxelGrid) -> bool {
        self.keys.iter().all(|k| other.keys.binary_search(k).is_ok())
    }
}

/// Voxelizes every nonzero depth pixel; zero pixels and cells outside the
/// grid are skipped.
pub fn voxelize(depth: &DepthImage, intr: &Intrinsics<f64>, spec: &VoxelGridSpec) -> VoxelGrid {
    voxelize_points(&depth_to_points(depth, intr), spec)
}

pub fn voxelize_points(cloud: &PointCloud<f64>, spec: &VoxelGridSpec) -> VoxelGrid {
    let keys = cloud
        .points
        .iter()
        .filter_map(|p| spec.index_of(p.x, p.y, p.z))
        .map(|idx| spec.pack(idx))
        .collect();
    VoxelGrid::from_unsorted(*spec, keys)
}

/// Moves each occupied voxel's center by `t` and re-voxelizes; colliding
/// cells merge and cells leaving the grid are dropped.
pub fn transform_grid(g: &VoxelGrid, t: &Rigid3<f64>) -> VoxelGrid {
    let spec = g.spec;
    let keys = g
        .iter()
        .filter_map(|idx| {
            let p = t.apply(Point3::from_array(spec.center(idx)));
            spec.index_of(p.x, p.y, p.z)
        })
        .map(|idx| spec.pack(idx))
        .collect();
    VoxelGrid::from_unsorted(spec, keys)
}

/// Voxel-wise OR.
pub fn or_grids(a: &VoxelGrid, b: &VoxelGrid) -> Result<VoxelGrid, PointCloudError> {
    if a.spec != b.spec {
        return Err(PointCloudError::SpecMismatch(a.spec, b.spec));
    }
    let mut keys = Vec::with_capacity(a.keys.len() + b.keys.len());
    let (mut i, mut j) = (0, 0);
    while i < a.keys.len() && j < b.keys.len() {
        let (x, y) = (a.keys[i], b.keys[j]);
        keys.push(x.min(y));
        i += (x <= y) as usize;
        j += (y <= x) as usize;
    }
    keys.extend_from_slice(&a.keys[i..]);
    keys.extend_from_slice(&b.keys[j..]);
    Ok(VoxelGrid { spec: a.spec, keys })
}

/// Projects voxel centers into a `width × height` depth image; the nearest
/// center wins each pixel and unhit pixels stay 0.
pub fn reproject(g: &VoxelGrid, intr: &Intrinsics<f64>, dims: (usize, usize)) -> DepthImage {
    let (w, h) = dims;
    let mut out = DepthImage::filled(w, h, 0);
    for idx in g.iter() {
        let [x, y, z] = g.spec.center(idx);
        if z <= 0.0 {
            continue;
        }
        let u = (intr.fx * x / z + intr.cx).round();
        let v = (intr.fy * y / z + intr.cy).round();
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            continue;
        }
        let mm = (z * 1000.0).round().clamp(1.0, 65535.0) as u16;
        let (u, v) = (u as usize, v as usize);
        let cur = out.get(u, v);
        if cur == 0 || mm < cur {
            out.set(u, v, mm);
        }
    }
    out
}
