//! Domain types shared across the pipeline: boxes, point annotations,
//! camera calibrations, and scenes.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let two_pi = 2.0 * PI;
    let mut r = (a + PI) % two_pi;
    if r < 0.0 {
        r += two_pi;
    }
    r - PI
}

/// A 7-DoF oriented box: center, dimensions, yaw about +z, plus category and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// Center in meters (LiDAR frame).
    pub center: [f64; 3],
    /// Width, length, height in meters; all strictly positive.
    pub dims: [f64; 3],
    /// Heading in radians, wrapped into `[-pi, pi)`.
    pub yaw: f64,
    pub category: u32,
    /// Confidence in `[0, 1]`; 1.0 for ground truth.
    pub score: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64, category: u32, score: f64) -> Result<Self> {
        if dims.iter().any(|d| *d <= 0.0) {
            return Err(Error::config(format!("box dims must be positive, got {dims:?}")));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::config(format!("box score must be in [0,1], got {score}")));
        }
        Ok(Box3D { center, dims, yaw: wrap_angle(yaw), category, score })
    }

    /// Ground-truth constructor (score pinned to 1.0).
    pub fn ground_truth(center: [f64; 3], dims: [f64; 3], yaw: f64, category: u32) -> Result<Self> {
        Self::new(center, dims, yaw, category, 1.0)
    }

    /// Transforms a world-frame point into this box's local frame
    /// (inverse yaw rotation about the center).
    pub fn world_to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        let (s, c) = self.yaw.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy, dz]
    }

    /// Transforms a box-local point into the world frame.
    pub fn local_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * p[0] - s * p[1],
            self.center[1] + s * p[0] + c * p[1],
            self.center[2] + p[2],
        ]
    }

    /// True if the world-frame point lies inside the box (closed faces).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.world_to_local(p);
        l[0].abs() <= self.dims[0] / 2.0 + 1e-12
            && l[1].abs() <= self.dims[1] / 2.0 + 1e-12
            && l[2].abs() <= self.dims[2] / 2.0 + 1e-12
    }

    /// Distance of the box center from the ego origin in the BEV plane.
    pub fn bev_range(&self) -> f64 {
        (self.center[0].powi(2) + self.center[1].powi(2)).sqrt()
    }

    /// The 8 corners in world coordinates.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let hw = self.dims[0] / 2.0;
        let hl = self.dims[1] / 2.0;
        let hh = self.dims[2] / 2.0;
        let mut out = [[0.0; 3]; 8];
        let mut i = 0;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out[i] = self.local_to_world([sx * hw, sy * hl, sz * hh]);
                    i += 1;
                }
            }
        }
        out
    }
}

/// The weak label: a single 3D point inside an object plus its category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub position: [f64; 3],
    pub category: u32,
}

/// Pinhole camera calibration for one view, mapping LiDAR to camera coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    /// Row-major 3x3 intrinsic matrix (upper triangular, positive focal entries).
    pub k: [[f64; 3]; 3],
    /// Row-major 3x3 rotation, LiDAR frame to camera frame.
    pub r: [[f64; 3]; 3],
    /// Translation in meters, LiDAR frame to camera frame.
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl CameraCalib {
    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.k[i][j])
    }

    pub fn r_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.r[i][j])
    }

    pub fn t_vector(&self) -> Vector3<f64> {
        Vector3::new(self.t[0], self.t[1], self.t[2])
    }

    /// Checks R orthonormality (RᵀR = I within 1e-6) and K upper-triangular
    /// with positive focal entries.
    pub fn validate(&self) -> Result<()> {
        let r = self.r_matrix();
        let e = (r.transpose() * r - Matrix3::identity()).abs().max();
        if e > 1e-6 {
            return Err(Error::config(format!("camera R not orthonormal (max residual {e:.2e})")));
        }
        let k = &self.k;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return Err(Error::config("camera K must be upper triangular"));
        }
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(Error::config("camera K focal entries must be positive"));
        }
        Ok(())
    }
}

/// Per-view dense feature raster, `channels x height x width`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageRaster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageRaster { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// A full labeled scene: point cloud, per-view rasters, calibrations, boxes,
/// and one point annotation per box (same order).
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: u64,
    /// N points, LiDAR frame, meters.
    pub points: Vec<[f64; 3]>,
    pub images: Vec<ImageRaster>,
    pub calibs: Vec<CameraCalib>,
    pub boxes: Vec<Box3D>,
    pub annotations: Vec<PointAnnotation>,
}

impl Scene {
    /// Checks the paired-label invariants: equal lengths and matching categories.
    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.annotations.len() {
            return Err(Error::shape(format!(
                "scene {}: {} boxes vs {} annotations",
                self.id,
                self.boxes.len(),
                self.annotations.len()
            )));
        }
        for (b, a) in self.boxes.iter().zip(&self.annotations) {
            if b.category != a.category {
                return Err(Error::shape(format!(
                    "scene {}: annotation category {} does not match box category {}",
                    self.id, a.category, b.category
                )));
            }
        }
        for c in &self.calibs {
            c.validate()?;
        }
        Ok(())
    }
}

/// A weakly labeled scene: everything a training loader may see.
/// Ground-truth boxes are deliberately absent from this type.
#[derive(Debug, Clone)]
pub struct WeakScene {
    pub id: u64,
    pub points: Vec<[f64; 3]>,
    pub images: Vec<ImageRaster>,
    pub calibs: Vec<CameraCalib>,
    pub annotations: Vec<PointAnnotation>,
}

impl WeakScene {
    pub fn from_scene(s: &Scene) -> Self {
        WeakScene {
            id: s.id,
            points: s.points.clone(),
            images: s.images.clone(),
            calibs: s.calibs.clone(),
            annotations: s.annotations.clone(),
        }
    }
}

/// A scored detection emitted by a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub boxed: Box3D,
}

impl Detection {
    pub fn new(boxed: Box3D) -> Self {
        Detection { boxed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_angle_interval() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(PI) - (-PI)).abs() < 1e-15, "pi wraps to -pi");
        assert!((wrap_angle(-PI) - (-PI)).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI) - (-PI)).abs() < 1e-12);
        assert!((wrap_angle(2.5 * PI) - 0.5 * PI).abs() < 1e-12);
        for k in -20..20 {
            let a = 0.3 + k as f64 * PI / 3.0;
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w));
            assert!(((a - w) / (2.0 * PI)).round() * 2.0 * PI + w - a < 1e-9);
        }
    }

    #[test]
    fn box_rejects_bad_fields() {
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0, 0, 1.0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.0, 0, 1.5).is_err());
        let b = Box3D::new([0.0; 3], [1.0, 2.0, 3.0], 4.0, 1, 0.5).unwrap();
        assert!((-PI..PI).contains(&b.yaw));
    }

    #[test]
    fn local_world_round_trip() {
        let b = Box3D::ground_truth([3.0, -2.0, 1.0], [2.0, 4.0, 1.5], 0.7, 2).unwrap();
        let p = [0.3, -1.1, 0.4];
        let w = b.local_to_world(p);
        let l = b.world_to_local(w);
        for i in 0..3 {
            assert!((l[i] - p[i]).abs() < 1e-12);
        }
        assert!(b.contains(b.center));
        assert!(!b.contains([100.0, 0.0, 0.0]));
    }

    #[test]
    fn scene_validation_catches_category_mismatch() {
        let b = Box3D::ground_truth([0.0; 3], [1.0; 3], 0.0, 1).unwrap();
        let scene = Scene {
            id: 0,
            points: vec![],
            images: vec![],
            calibs: vec![],
            boxes: vec![b],
            annotations: vec![PointAnnotation { position: [0.0; 3], category: 2 }],
        };
        assert!(scene.validate().is_err());
    }
}
