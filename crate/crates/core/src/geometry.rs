//! Points, rigid motions, 2D affine maps and pinhole intrinsics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1")]
    NotARotation,
    #[error("affine linear block is singular (|det| = {0:e})")]
    SingularAffine(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// A point in camera or world space, meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Point3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn distance(&self, other: &Self) -> T {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

pub type Matrix3<T> = [[T; 3]; 3];

fn mat_mul<T: Real>(a: &Matrix3<T>, b: &Matrix3<T>) -> Matrix3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

fn mat_vec<T: Real>(a: &Matrix3<T>, v: [T; 3]) -> [T; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose<T: Real>(a: &Matrix3<T>) -> Matrix3<T> {
    let mut out = *a;
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[c][r];
        }
    }
    out
}

fn det3<T: Real>(a: &Matrix3<T>) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn identity3<T: Real>() -> Matrix3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

fn skew<T: Real>(w: [T; 3]) -> Matrix3<T> {
    let z = T::zero();
    [[z, -w[2], w[1]], [w[2], z, -w[0]], [-w[1], w[0], z]]
}

/// Largest entry of `|RᵀR − I|` together with `|det R − 1|`.
fn orthonormality_drift<T: Real>(r: &Matrix3<T>) -> T {
    let rtr = mat_mul(&transpose(r), r);
    let id = identity3::<T>();
    let mut worst = (det3(r) - T::one()).abs();
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((rtr[i][j] - id[i][j]).abs());
        }
    }
    worst
}

/// Gram–Schmidt on the rows, third row rebuilt as the cross product so the
/// result is a proper rotation.
fn reorthonormalize<T: Real>(r: &Matrix3<T>) -> Matrix3<T> {
    let norm = |v: [T; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let dot = |a: [T; 3], b: [T; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let r0 = r[0];
    let n0 = norm(r0);
    let e0 = [r0[0] / n0, r0[1] / n0, r0[2] / n0];
    let d = dot(r[1], e0);
    let r1 = [r[1][0] - d * e0[0], r[1][1] - d * e0[1], r[1][2] - d * e0[2]];
    let n1 = norm(r1);
    let e1 = [r1[0] / n1, r1[1] / n1, r1[2] / n1];
    let e2 = [
        e0[1] * e1[2] - e0[2] * e1[1],
        e0[2] * e1[0] - e0[0] * e1[2],
        e0[0] * e1[1] - e0[1] * e1[0],
    ];
    [e0, e1, e2]
}

/// Rigid camera motion in SE(3): `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rigid3<T> {
    pub rotation: Matrix3<T>,
    pub translation: [T; 3],
}

impl<T: Real> Default for Rigid3<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Rigid3<T> {
    pub fn identity() -> Self {
        Self {
            rotation: identity3(),
            translation: [T::zero(); 3],
        }
    }

    /// Validating constructor.
    pub fn new(rotation: Matrix3<T>, translation: [T; 3]) -> Result<Self, GeometryError> {
        let t = Self {
            rotation,
            translation,
        };
        if !rotation.iter().flatten().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("rigid transform"));
        }
        if !t.is_valid() {
            return Err(GeometryError::NotARotation);
        }
        Ok(t)
    }

    pub fn from_translation(x: T, y: T, z: T) -> Self {
        Self {
            rotation: identity3(),
            translation: [x, y, z],
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: [T; 3], angle: T) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == T::zero() || angle == T::zero() {
            return Self::identity();
        }
        let w = [axis[0] / n * angle, axis[1] / n * angle, axis[2] / n * angle];
        Self {
            rotation: so3_exp(w),
            translation: [T::zero(); 3],
        }
    }

    pub fn rotation_z(angle: T) -> Self {
        Self::from_axis_angle([T::zero(), T::zero(), T::one()], angle)
    }

    pub fn with_translation(mut self, t: [T; 3]) -> Self {
        self.translation = t;
        self
    }

    /// Exponential map of a twist `(ρ, ω)`: translation part first, rotation part last.
    pub fn exp(twist: [T; 6]) -> Self {
        let rho = [twist[0], twist[1], twist[2]];
        let w = [twist[3], twist[4], twist[5]];
        let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
        let theta = theta2.sqrt();
        let k = skew(w);
        let k2 = mat_mul(&k, &k);
        let (a, b) = if theta < T::lit(1e-8) {
            (T::lit(0.5), T::lit(1.0 / 6.0))
        } else {
            (
                (T::one() - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let mut v = identity3::<T>();
        for i in 0..3 {
            for j in 0..3 {
                v[i][j] = v[i][j] + a * k[i][j] + b * k2[i][j];
            }
        }
        Self {
            rotation: so3_exp(w),
            translation: mat_vec(&v, rho),
        }
    }

    pub fn apply(&self, p: Point3<T>) -> Point3<T> {
        let r = mat_vec(&self.rotation, p.to_array());
        Point3::new(
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        )
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let mut rotation = mat_mul(&self.rotation, &other.rotation);
        if orthonormality_drift(&rotation) > T::ortho_tolerance() {
            rotation = reorthonormalize(&rotation);
        }
        let rt = mat_vec(&self.rotation, other.translation);
        Self {
            rotation,
            translation: [
                rt[0] + self.translation[0],
                rt[1] + self.translation[1],
                rt[2] + self.translation[2],
            ],
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        Self {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> T {
        let r = &self.rotation;
        let c = (r[0][0] + r[1][1] + r[2][2] - T::one()) / T::lit(2.0);
        c.max(-T::one()).min(T::one()).acos()
    }

    pub fn translation_norm(&self) -> T {
        let t = self.translation;
        (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt()
    }

    pub fn is_valid(&self) -> bool {
        orthonormality_drift(&self.rotation) <= T::ortho_tolerance()
    }

    /// `n`-fold composition `self ∘ … ∘ self`; `powi(0)` is the identity.
    pub fn powi(&self, n: usize) -> Self {
        (0..n).fold(Self::identity(), |acc, _| self.compose(&acc))
    }

    pub fn cast<U: Real>(&self) -> Rigid3<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Rigid3 {
            rotation: self.rotation.map(|row| row.map(c)),
            translation: self.translation.map(c),
        }
    }
}

/// Rodrigues' formula.
fn so3_exp<T: Real>(w: [T; 3]) -> Matrix3<T> {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let (a, b) = if theta < T::lit(1e-8) {
        (T::one(), T::lit(0.5))
    } else {
        (theta.sin() / theta, (T::one() - theta.cos()) / (theta * theta))
    };
    let mut r = identity3::<T>();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = r[i][j] + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

pub fn compose_rigid<T: Real>(a: &Rigid3<T>, b: &Rigid3<T>) -> Rigid3<T> {
    a.compose(b)
}

pub fn apply_rigid<T: Real>(t: &Rigid3<T>, p: Point3<T>) -> Point3<T> {
    t.apply(p)
}

/// 2×3 affine map `p ↦ A·p + b`, stored as `[[a00, a01, b0], [a10, a11, b1]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine2<T> {
    pub m: [[T; 3]; 2],
}

impl<T: Real> Default for Affine2<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Affine2<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, z], [z, o, z]] }
    }

    pub fn new(m: [[T; 3]; 2]) -> Result<Self, GeometryError> {
        if !m.iter().flatten().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("affine matrix"));
        }
        let a = Self { m };
        let det = a.det();
        if det.abs() <= T::lit(1e-9) {
            return Err(GeometryError::SingularAffine(det.to_f64_lossy()));
        }
        Ok(a)
    }

    pub fn translation(tx: T, ty: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, tx], [z, o, ty]] }
    }

    /// Similarity about `center`: rotate by `angle`, scale by `scale`, then shift.
    pub fn similarity(center: [T; 2], angle: T, scale: T, shift: [T; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let a = [[scale * c, -scale * s], [scale * s, scale * c]];
        let bx = center[0] + shift[0] - (a[0][0] * center[0] + a[0][1] * center[1]);
        let by = center[1] + shift[1] - (a[1][0] * center[0] + a[1][1] * center[1]);
        Self {
            m: [[a[0][0], a[0][1], bx], [a[1][0], a[1][1], by]],
        }
    }

    pub fn det(&self) -> T {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply(&self, p: [T; 2]) -> [T; 2] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let det = self.det();
        if det.abs() <= T::lit(1e-9) {
            return Err(GeometryError::SingularAffine(det.to_f64_lossy()));
        }
        let m = &self.m;
        let ia = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let bx = -(ia[0][0] * m[0][2] + ia[0][1] * m[1][2]);
        let by = -(ia[1][0] * m[0][2] + ia[1][1] * m[1][2]);
        Ok(Self {
            m: [[ia[0][0], ia[0][1], bx], [ia[1][0], ia[1][1], by]],
        })
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[T::zero(); 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Self { m }
    }

    pub fn is_valid(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite()) && self.det().abs() > T::lit(1e-9)
    }

    pub fn cast<U: Real>(&self) -> Affine2<U> {
        Affine2 {
            m: self.m.map(|row| row.map(|v| U::lit(v.to_f64_lossy()))),
        }
    }
}

pub fn apply_affine<T: Real>(m: &Affine2<T>, p: [T; 2]) -> [T; 2] {
    m.apply(p)
}

/// Pinhole intrinsics in pixels; pixel centers sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// Stereo baseline in meters; only the synthetic generator uses it.
    #[serde(default)]
    pub baseline: Option<T>,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            baseline: None,
        }
    }

    pub fn with_baseline(mut self, b: T) -> Self {
        self.baseline = Some(b);
        self
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), GeometryError> {
        let ok = self.fx > T::zero()
            && self.fy > T::zero()
            && self.cx >= T::zero()
            && self.cy >= T::zero()
            && self.cx < T::lit(width as f64)
            && self.cy < T::lit(height as f64);
        if !ok {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "fx={} fy={} cx={} cy={} for {}x{}",
                self.fx, self.fy, self.cx, self.cy, width, height
            )));
        }
        Ok(())
    }

    pub fn project(&self, p: Point3<T>) -> [T; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }

    pub fn unproject(&self, u: T, v: T, z: T) -> Point3<T> {
        Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Intrinsics for an image resampled by `(sx, sy)` with the
    /// endpoint-aligned convention (`u' = u·s`).
    pub fn scaled(&self, sx: T, sy: T) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            baseline: self.baseline,
        }
    }

    /// Intrinsics after 2×2 block averaging (pixel `u'` covers `2u'` and `2u'+1`).
    pub fn halved(&self) -> Self {
        let h = T::lit(0.5);
        Self {
            fx: self.fx * h,
            fy: self.fy * h,
            cx: (self.cx - h) * h,
            cy: (self.cy - h) * h,
            baseline: self.baseline,
        }
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Intrinsics {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            baseline: self.baseline.map(c),
        }
    }
}
