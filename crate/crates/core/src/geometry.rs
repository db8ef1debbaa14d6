//! Coordinate transforms: LiDAR-to-camera projection, view selection, RoI
//! grids, BEV gridding, Gaussian BEV masks, and exactly invertible BEV
//! augmentations.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CameraCalib, PointAnnotation};

/// Bird's-eye-view grid specification. Cell `(row, col)` covers the metric
/// rectangle `[x_min + col*res, x_min + (col+1)*res) x [y_min + row*res, ...)`,
/// so cell centers sit at continuous grid coordinates `(row + 0.5, col + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Meters per cell.
    pub resolution: f64,
}

impl BevSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, resolution: f64) -> Result<Self> {
        if resolution <= 0.0 || x_max <= x_min || y_max <= y_min {
            return Err(Error::config("invalid BEV spec ranges"));
        }
        let s = BevSpec { x_min, x_max, y_min, y_max, resolution };
        let w = (x_max - x_min) / resolution;
        let h = (y_max - y_min) / resolution;
        if (w - w.round()).abs() > 1e-9 || (h - h.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "BEV extent must be an integer number of cells (got {w} x {h})"
            )));
        }
        Ok(s)
    }

    /// Cell count along y.
    pub fn rows(&self) -> usize {
        ((self.y_max - self.y_min) / self.resolution).round() as usize
    }

    /// Cell count along x.
    pub fn cols(&self) -> usize {
        ((self.x_max - self.x_min) / self.resolution).round() as usize
    }

    /// Metric center of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.resolution,
            self.y_min + (row as f64 + 0.5) * self.resolution,
        )
    }
}

/// Continuous BEV grid coordinates of a point, plus an in-range flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevProjection {
    pub row: f64,
    pub col: f64,
    pub in_range: bool,
}

/// Affine map from meters into continuous cell coordinates. Out-of-range
/// points are flagged, never clamped.
pub fn bev_project(p: [f64; 3], spec: &BevSpec) -> BevProjection {
    let col = (p[0] - spec.x_min) / spec.resolution;
    let row = (p[1] - spec.y_min) / spec.resolution;
    let in_range =
        p[0] >= spec.x_min && p[0] < spec.x_max && p[1] >= spec.y_min && p[1] < spec.y_max;
    BevProjection { row, col, in_range }
}

/// Pixel-space projection of a LiDAR point into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Projects a LiDAR-frame point through `K(Rp + t)` with explicit perspective
/// division; the camera-frame depth is carried alongside the pixel coordinates.
pub fn project_lidar_to_camera(p3d: [f64; 3], calib: &CameraCalib) -> Result<PixelProjection> {
    let p = nalgebra::Vector3::new(p3d[0], p3d[1], p3d[2]);
    let q = calib.k_matrix() * (calib.r_matrix() * p + calib.t_vector());
    let depth = q[2];
    if depth <= 0.0 {
        return Err(Error::BehindCamera { depth });
    }
    Ok(PixelProjection { u: q[0] / depth, v: q[1] / depth, depth })
}

/// Inverse of [`project_lidar_to_camera`]: reconstructs the LiDAR-frame point
/// from pixel coordinates and depth.
pub fn backproject_pixel(proj: &PixelProjection, calib: &CameraCalib) -> Result<[f64; 3]> {
    let k_inv = calib
        .k_matrix()
        .try_inverse()
        .ok_or_else(|| Error::config("camera K is singular"))?;
    let q = nalgebra::Vector3::new(proj.u * proj.depth, proj.v * proj.depth, proj.depth);
    let p = calib.r_matrix().transpose() * (k_inv * q - calib.t_vector());
    Ok([p[0], p[1], p[2]])
}

/// Picks the view that sees the point, preferring the projection closest to
/// its image center; ties break toward the lowest view index.
pub fn select_view(
    p3d: [f64; 3],
    calibs: &[CameraCalib],
) -> Option<(usize, PixelProjection)> {
    let mut best: Option<(usize, PixelProjection, f64)> = None;
    for (idx, calib) in calibs.iter().enumerate() {
        let Ok(proj) = project_lidar_to_camera(p3d, calib) else {
            continue;
        };
        let w = calib.width as f64;
        let h = calib.height as f64;
        if proj.u < 0.0 || proj.u >= w || proj.v < 0.0 || proj.v >= h {
            continue;
        }
        let d2 = (proj.u - w / 2.0).powi(2) + (proj.v - h / 2.0).powi(2);
        let better = match &best {
            None => true,
            Some((_, _, bd)) => d2 < *bd,
        };
        if better {
            best = Some((idx, proj, d2));
        }
    }
    best.map(|(i, p, _)| (i, p))
}

/// A K x K square grid of reference points centered on a 2D location.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiGrid {
    pub center: [f64; 2],
    /// K^2 x 2 array of (x, y) reference points, row-major over the grid.
    pub points: Array2<f64>,
    pub k: usize,
}

/// Builds the K x K grid with offsets `(i - (K-1)/2) * spacing`; the grid mean
/// equals `center` exactly.
pub fn make_roi_grid(center: [f64; 2], k: usize, spacing: f64) -> Result<RoiGrid> {
    if k < 1 {
        return Err(Error::config("RoI grid side K must be >= 1"));
    }
    if spacing <= 0.0 {
        return Err(Error::config("RoI grid spacing must be positive"));
    }
    let half = (k as f64 - 1.0) / 2.0;
    let mut points = Array2::zeros((k * k, 2));
    for i in 0..k {
        for j in 0..k {
            let idx = i * k + j;
            points[[idx, 0]] = center[0] + (j as f64 - half) * spacing;
            points[[idx, 1]] = center[1] + (i as f64 - half) * spacing;
        }
    }
    Ok(RoiGrid { center, points, k })
}

/// Class-agnostic Gaussian mask over the BEV grid: one Gaussian per point
/// annotation evaluated at cell centers, combined by elementwise max.
pub fn gaussian_bev_mask(
    annotations: &[PointAnnotation],
    spec: &BevSpec,
    sigma: f64,
) -> Result<Array2<f64>> {
    if sigma <= 0.0 {
        return Err(Error::config("mask sigma must be positive"));
    }
    let (h, w) = (spec.rows(), spec.cols());
    let mut mask = Array2::zeros((h, w));
    for ann in annotations {
        let p = bev_project(ann.position, spec);
        for i in 0..h {
            for j in 0..w {
                let dc = (j as f64 + 0.5) - p.col;
                let dr = (i as f64 + 0.5) - p.row;
                let m = (-(dc * dc + dr * dr) / (2.0 * sigma * sigma)).exp();
                if m > mask[[i, j]] {
                    mask[[i, j]] = m;
                }
            }
        }
    }
    Ok(mask)
}

/// An exactly invertible BEV augmentation: axis flips plus quarter-turn
/// rotations, all pure cell permutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BevAugmentation {
    /// Mirror the x axis (reverses columns).
    pub flip_x: bool,
    /// Mirror the y axis (reverses rows).
    pub flip_y: bool,
    /// Number of 90-degree counterclockwise quarter turns, in {0,1,2,3}.
    pub rot90: u8,
}

impl BevAugmentation {
    pub const IDENTITY: BevAugmentation = BevAugmentation { flip_x: false, flip_y: false, rot90: 0 };

    /// All 16 parameter combinations.
    pub fn all() -> Vec<BevAugmentation> {
        let mut v = Vec::with_capacity(16);
        for flip_x in [false, true] {
            for flip_y in [false, true] {
                for rot90 in 0..4u8 {
                    v.push(BevAugmentation { flip_x, flip_y, rot90 });
                }
            }
        }
        v
    }

    /// The matching metric-space transform of a point, for augmenting inputs
    /// consistently with the feature-map permutation (symmetric grids only).
    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = p;
        if self.flip_x {
            q[0] = -q[0];
        }
        if self.flip_y {
            q[1] = -q[1];
        }
        for _ in 0..self.rot90 % 4 {
            q = [-q[1], q[0], q[2]];
        }
        q
    }
}

fn flip_cols(map: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = map.dim();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| map[[ci, i, w - 1 - j]])
}

fn flip_rows(map: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = map.dim();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| map[[ci, h - 1 - i, j]])
}

/// One counterclockwise quarter turn in metric (x, y) space:
/// `out[row][col] = in[h-1-col][row]`. Swaps the spatial dimensions, so even
/// turn counts remain valid on rectangular maps.
fn rot90_ccw(map: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = map.dim();
    Array3::from_shape_fn((c, w, h), |(ci, i, j)| map[[ci, h - 1 - j, i]])
}

fn check_rot_square(map: &Array3<f64>, aug: &BevAugmentation) -> Result<()> {
    let (_, h, w) = map.dim();
    if aug.rot90 % 2 == 1 && h != w {
        return Err(Error::config(format!(
            "odd quarter-turn rotation requires a square map, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Applies flips then rotation to a `C x H x W` map.
pub fn apply_bev_augmentation(map: &Array3<f64>, aug: &BevAugmentation) -> Result<Array3<f64>> {
    check_rot_square(map, aug)?;
    let mut out = map.clone();
    if aug.flip_x {
        out = flip_cols(&out);
    }
    if aug.flip_y {
        out = flip_rows(&out);
    }
    for _ in 0..aug.rot90 % 4 {
        out = rot90_ccw(&out);
    }
    Ok(out)
}

/// Exact inverse of [`apply_bev_augmentation`]: undoes the rotation, then the
/// flips, in reverse order.
pub fn invert_bev_augmentation(map: &Array3<f64>, aug: &BevAugmentation) -> Result<Array3<f64>> {
    check_rot_square(map, aug)?;
    let mut out = map.clone();
    for _ in 0..(4 - aug.rot90 % 4) % 4 {
        out = rot90_ccw(&out);
    }
    if aug.flip_y {
        out = flip_rows(&out);
    }
    if aug.flip_x {
        out = flip_cols(&out);
    }
    Ok(out)
}
