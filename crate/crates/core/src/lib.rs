//! Rectification of noisy 16-bit depth sequences.
//!
//! Each epoch fuses a short window of frames into a Boolean voxel grid,
//! reprojects it into a dense template depth image, then corrects every
//! following frame by registering the template onto it, replacing invalid
//! pixels from the template and median filtering the result. A new epoch
//! starts once registration stops finding enough good feature matches.

pub mod correction;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod morphology;
pub mod odometry;
pub mod pipeline;
pub mod pointcloud;
pub mod registration;
pub mod rng;
pub mod scalar;
pub mod synth;

pub use geometry::{Affine2, GeometryError, Intrinsics, Point3, Rigid3};
pub use image::{ColorImage, DepthImage, GrayImage, Plane, Rgb};
pub use scalar::Real;

pub type Point3d = Point3<f64>;
pub type Point3f = Point3<f32>;
pub type RigidTransform = Rigid3<f64>;
pub type RigidTransformF32 = Rigid3<f32>;
pub type AffineTransform2D = Affine2<f64>;
pub type AffineTransform2DF32 = Affine2<f32>;
pub type CameraIntrinsics = Intrinsics<f64>;
pub type CameraIntrinsicsF32 = Intrinsics<f32>;
