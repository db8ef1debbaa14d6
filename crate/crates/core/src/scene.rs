//! Procedural scene generation: surface-sampled boxes with range-dependent
//! point sparsity, a multi-view camera ring with category-coded footprint
//! rasters, weak point-annotation sampling, and the labeled/weak dataset split.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Box3D, CameraCalib, ImageRaster, PointAnnotation, Scene, WeakScene};

/// Per-category base dimensions (w, l, h) in meters, loosely car / truck /
/// pedestrian shaped.
pub const CATEGORY_BASE_DIMS: [[f64; 3]; 3] = [
    [1.9, 4.5, 1.6],
    [2.6, 7.0, 2.9],
    [0.8, 0.8, 1.8],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    /// Object center range from the ego origin, meters.
    pub r_min: f64,
    pub r_max: f64,
    pub n_categories: usize,
    pub n_cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub focal: f64,
    pub camera_height: f64,
    /// Expected surface points on an object at range r is `base_density / r^2`.
    pub base_density: f64,
    /// Uniform ground clutter points per scene.
    pub clutter_points: usize,
    /// Half-extent of the clutter field, meters.
    pub extent: f64,
    /// Per-axis LiDAR noise sigma, meters.
    pub point_noise: f64,
    /// Annotation sigma as a fraction of each box dimension.
    pub annotation_sigma_frac: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_objects_min: 4,
            n_objects_max: 8,
            r_min: 5.0,
            r_max: 50.0,
            n_categories: 3,
            n_cameras: 6,
            image_height: 48,
            image_width: 96,
            focal: 60.0,
            camera_height: 1.4,
            base_density: 40_000.0,
            clutter_points: 600,
            extent: 52.0,
            point_noise: 0.02,
            annotation_sigma_frac: 1.0 / 6.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras == 0 && self.base_density <= 0.0 {
            return Err(Error::config(
                "scene would carry no signal: zero cameras and zero point density",
            ));
        }
        if self.n_objects_min > self.n_objects_max {
            return Err(Error::config("n_objects_min > n_objects_max"));
        }
        if self.r_min <= 0.0 || self.r_max <= self.r_min {
            return Err(Error::config("object range interval invalid"));
        }
        if self.n_categories == 0 || self.n_categories > CATEGORY_BASE_DIMS.len() {
            return Err(Error::config(format!(
                "n_categories must be in 1..={}",
                CATEGORY_BASE_DIMS.len()
            )));
        }
        if self.annotation_sigma_frac < 0.0 {
            return Err(Error::config("annotation_sigma_frac must be >= 0"));
        }
        Ok(())
    }
}

/// A ring of `n` outward-facing pinhole cameras at 360/n degree spacing,
/// mounted at `camera_height` above the LiDAR origin.
pub fn camera_ring(n: usize, focal: f64, height: usize, width: usize, camera_height: f64) -> Vec<CameraCalib> {
    let mut calibs = Vec::with_capacity(n);
    for v in 0..n {
        let a = 2.0 * PI * v as f64 / n as f64;
        let (s, c) = a.sin_cos();
        // Camera axes in LiDAR coordinates: z forward, x right, y down.
        let r = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let center = [0.0, 0.0, camera_height];
        // t = -R * center
        let t = [
            -(r[0][0] * center[0] + r[0][1] * center[1] + r[0][2] * center[2]),
            -(r[1][0] * center[0] + r[1][1] * center[1] + r[1][2] * center[2]),
            -(r[2][0] * center[0] + r[2][1] * center[1] + r[2][2] * center[2]),
        ];
        calibs.push(CameraCalib {
            k: [
                [focal, 0.0, width as f64 / 2.0],
                [0.0, focal, height as f64 / 2.0],
                [0.0, 0.0, 1.0],
            ],
            r,
            t,
            width: width as u32,
            height: height as u32,
        });
    }
    calibs
}

/// Samples a weak point annotation: a truncated Gaussian around the box
/// center with per-axis sigma `dim * sigma_frac`, resampled until it falls
/// inside the box (at most 100 tries, then the center is used).
pub fn sample_point_annotation_scaled(
    box3d: &Box3D,
    sigma_frac: f64,
    rng: &mut ChaCha8Rng,
) -> PointAnnotation {
    if sigma_frac == 0.0 {
        return PointAnnotation { position: box3d.center, category: box3d.category };
    }
    for _ in 0..100 {
        let mut local = [0.0; 3];
        let mut ok = true;
        for (i, l) in local.iter_mut().enumerate() {
            let sigma = box3d.dims[i] * sigma_frac;
            let n = Normal::new(0.0, sigma).expect("valid sigma");
            *l = n.sample(rng);
            if l.abs() > box3d.dims[i] / 2.0 {
                ok = false;
            }
        }
        if ok {
            return PointAnnotation {
                position: box3d.local_to_world(local),
                category: box3d.category,
            };
        }
    }
    PointAnnotation { position: box3d.center, category: box3d.category }
}

/// Default-prior annotation sampling (sigma = dim/6 per axis).
pub fn sample_point_annotation(box3d: &Box3D, rng: &mut ChaCha8Rng) -> PointAnnotation {
    sample_point_annotation_scaled(box3d, 1.0 / 6.0, rng)
}

fn sample_box_surface(box3d: &Box3D, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let [w, l, h] = box3d.dims;
    // Face areas: two wl (top/bottom), two wh (front/back), two lh (sides).
    let a_wl = w * l;
    let a_wh = w * h;
    let a_lh = l * h;
    let total = 2.0 * (a_wl + a_wh + a_lh);
    let pick = rng.gen_range(0.0..total);
    let u = rng.gen_range(-0.5..0.5);
    let v = rng.gen_range(-0.5..0.5);
    let local = if pick < 2.0 * a_wl {
        let sz = if pick < a_wl { -0.5 } else { 0.5 };
        [u * w, v * l, sz * h]
    } else if pick < 2.0 * (a_wl + a_wh) {
        let sy = if pick < 2.0 * a_wl + a_wh { -0.5 } else { 0.5 };
        [u * w, sy * l, v * h]
    } else {
        let sx = if pick < 2.0 * (a_wl + a_wh) + a_lh { -0.5 } else { 0.5 };
        [sx * w, u * l, v * h]
    };
    box3d.local_to_world(local)
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn point_in_hull(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    if hull.len() < 3 {
        return false;
    }
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let cr = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cr < 0.0 {
            return false;
        }
    }
    true
}

/// Rasterizes every box footprint into per-view category channels: pixels
/// whose centers fall inside the projected-corner hull are set to 1.0.
fn render_views(boxes: &[Box3D], calibs: &[CameraCalib], channels: usize) -> Vec<ImageRaster> {
    let mut rasters = Vec::with_capacity(calibs.len());
    for calib in calibs {
        let (h, w) = (calib.height as usize, calib.width as usize);
        let mut raster = ImageRaster::zeros(channels, h, w);
        for b in boxes {
            let mut pts2d = Vec::with_capacity(8);
            let mut behind = false;
            for corner in b.corners() {
                match crate::geometry::project_lidar_to_camera(corner, calib) {
                    Ok(p) => pts2d.push((p.u, p.v)),
                    Err(_) => {
                        behind = true;
                        break;
                    }
                }
            }
            if behind || pts2d.is_empty() {
                continue;
            }
            let hull = convex_hull(pts2d);
            if hull.len() < 3 {
                continue;
            }
            let min_u = hull.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).max(0.0);
            let max_u = hull.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).min(w as f64);
            let min_v = hull.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).max(0.0);
            let max_v = hull.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).min(h as f64);
            if min_u >= max_u || min_v >= max_v {
                continue;
            }
            let ch = (b.category as usize).min(channels - 1);
            for py in min_v.floor() as usize..(max_v.ceil() as usize).min(h) {
                for px in min_u.floor() as usize..(max_u.ceil() as usize).min(w) {
                    let center = (px as f64 + 0.5, py as f64 + 0.5);
                    if point_in_hull(&hull, center) {
                        *raster.at_mut(ch, py, px) = 1.0;
                    }
                }
            }
        }
        rasters.push(raster);
    }
    rasters
}

/// Generates one labeled scene. Deterministic for a fixed `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.gen_range(config.n_objects_min..=config.n_objects_max);

    let mut boxes: Vec<Box3D> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        for _attempt in 0..50 {
            let category = rng.gen_range(0..config.n_categories) as u32;
            let base = CATEGORY_BASE_DIMS[category as usize];
            let dims = [
                base[0] * rng.gen_range(0.85..1.2),
                base[1] * rng.gen_range(0.85..1.2),
                base[2] * rng.gen_range(0.85..1.2),
            ];
            let r = rng.gen_range(config.r_min..config.r_max);
            let theta = rng.gen_range(0.0..2.0 * PI);
            let yaw = rng.gen_range(-PI..PI);
            let center = [r * theta.cos(), r * theta.sin(), dims[2] / 2.0];
            let candidate = Box3D::ground_truth(center, dims, yaw, category)?;
            let sep = |a: &Box3D, b: &Box3D| {
                let dx = a.center[0] - b.center[0];
                let dy = a.center[1] - b.center[1];
                let need = 0.5
                    * ((a.dims[0].powi(2) + a.dims[1].powi(2)).sqrt()
                        + (b.dims[0].powi(2) + b.dims[1].powi(2)).sqrt());
                (dx * dx + dy * dy).sqrt() > need + 0.5
            };
            if boxes.iter().all(|b| sep(b, &candidate)) {
                boxes.push(candidate);
                break;
            }
        }
    }

    let mut points: Vec<[f64; 3]> = Vec::new();
    let noise = Normal::new(0.0, config.point_noise.max(1e-12)).expect("valid noise sigma");
    for b in &boxes {
        let r = b.bev_range().max(1.0);
        let lambda = config.base_density / (r * r);
        let n_pts = if lambda <= 0.0 {
            0
        } else {
            Poisson::new(lambda).expect("valid lambda").sample(&mut rng) as usize
        };
        for _ in 0..n_pts {
            let mut p = sample_box_surface(b, &mut rng);
            if config.point_noise > 0.0 {
                for c in p.iter_mut() {
                    *c += noise.sample(&mut rng);
                }
            }
            points.push(p);
        }
    }
    for _ in 0..config.clutter_points {
        points.push([
            rng.gen_range(-config.extent..config.extent),
            rng.gen_range(-config.extent..config.extent),
            rng.gen_range(0.0..0.25),
        ]);
    }

    let annotations: Vec<PointAnnotation> = boxes
        .iter()
        .map(|b| sample_point_annotation_scaled(b, config.annotation_sigma_frac, &mut rng))
        .collect();

    let calibs = camera_ring(
        config.n_cameras,
        config.focal,
        config.image_height,
        config.image_width,
        config.camera_height,
    );
    let images = render_views(&boxes, &calibs, config.n_categories);

    let scene = Scene { id: seed, points, images, calibs, boxes, annotations };
    scene.validate()?;
    Ok(scene)
}

/// Re-draws the weak annotations of a scene from its boxes (training-time
/// jitter for the teacher). The scene's stored annotations are not changed.
pub fn resample_annotations(scene: &Scene, sigma_frac: f64, rng: &mut ChaCha8Rng) -> Vec<PointAnnotation> {
    scene
        .boxes
        .iter()
        .map(|b| sample_point_annotation_scaled(b, sigma_frac, rng))
        .collect()
}

/// The labeled/weak split. The weak scenes' ground-truth boxes are moved into
/// a hidden store that only the evaluation path reads.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub labeled: Vec<Scene>,
    pub weak: Vec<WeakScene>,
    held_out_boxes: Vec<(u64, Vec<Box3D>)>,
}

impl SplitDataset {
    /// Evaluation-only access to the weak split's ground truth.
    pub fn weak_ground_truth_for_eval(&self) -> &[(u64, Vec<Box3D>)] {
        &self.held_out_boxes
    }
}

/// Sequentially splits scenes: the first `ceil(ratio * N)` stay fully
/// labeled; the rest keep only point annotations.
pub fn split_dataset(scenes: Vec<Scene>, ratio: f64) -> Result<SplitDataset> {
    if ratio <= 0.0 || ratio > 1.0 {
        return Err(Error::config(format!("split ratio must be in (0,1], got {ratio}")));
    }
    let n = scenes.len();
    let n_labeled = (((ratio * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1));
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut weak = Vec::new();
    let mut held = Vec::new();
    for (i, s) in scenes.into_iter().enumerate() {
        if i < n_labeled {
            labeled.push(s);
        } else {
            held.push((s.id, s.boxes.clone()));
            weak.push(WeakScene::from_scene(&s));
        }
    }
    Ok(SplitDataset { labeled, weak, held_out_boxes: held })
}
