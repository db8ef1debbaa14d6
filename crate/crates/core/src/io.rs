//! On-disk formats: per-scene JSON documents with sibling little-endian f32
//! image blobs, dataset manifests with split assignments, a hidden
//! evaluation-only store for the weak split's ground truth, pseudo-label
//! JSONL files, and JSONL training logs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Box3D, CameraCalib, ImageRaster, PointAnnotation, Scene, WeakScene};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub category: u32,
}

impl BoxRecord {
    pub fn from_box(b: &Box3D) -> Self {
        BoxRecord {
            cx: b.center[0],
            cy: b.center[1],
            cz: b.center[2],
            w: b.dims[0],
            l: b.dims[1],
            h: b.dims[2],
            yaw: b.yaw,
            category: b.category,
        }
    }

    pub fn to_box(&self, score: f64) -> Result<Box3D> {
        Box3D::new([self.cx, self.cy, self.cz], [self.w, self.l, self.h], self.yaw, self.category, score)
    }
}

/// 9-field box record carrying a confidence score (pseudo labels).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredBoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub category: u32,
    pub score: f64,
}

impl ScoredBoxRecord {
    pub fn from_box(b: &Box3D) -> Self {
        ScoredBoxRecord {
            cx: b.center[0],
            cy: b.center[1],
            cz: b.center[2],
            w: b.dims[0],
            l: b.dims[1],
            h: b.dims[2],
            yaw: b.yaw,
            category: b.category,
            score: b.score,
        }
    }

    pub fn to_box(&self) -> Result<Box3D> {
        Box3D::new([self.cx, self.cy, self.cz], [self.w, self.l, self.h], self.yaw, self.category, self.score)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationRecord {
    x: f64,
    y: f64,
    z: f64,
    category: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CalibRecord {
    /// Row-major 3x3.
    k: Vec<f64>,
    /// Row-major 3x3.
    r: Vec<f64>,
    t: [f64; 3],
    width: u32,
    height: u32,
}

impl CalibRecord {
    fn from_calib(c: &CameraCalib) -> Self {
        let flat = |m: &[[f64; 3]; 3]| m.iter().flatten().cloned().collect::<Vec<f64>>();
        CalibRecord { k: flat(&c.k), r: flat(&c.r), t: c.t, width: c.width, height: c.height }
    }

    fn to_calib(&self) -> Result<CameraCalib> {
        if self.k.len() != 9 || self.r.len() != 9 {
            return Err(Error::shape("calib matrices must have 9 entries"));
        }
        let unflat = |v: &[f64]| {
            [
                [v[0], v[1], v[2]],
                [v[3], v[4], v[5]],
                [v[6], v[7], v[8]],
            ]
        };
        Ok(CameraCalib {
            k: unflat(&self.k),
            r: unflat(&self.r),
            t: self.t,
            width: self.width,
            height: self.height,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneDoc {
    id: u64,
    /// Flat row-major N x 3 point list.
    points: Vec<f64>,
    boxes: Vec<BoxRecord>,
    annotations: Vec<AnnotationRecord>,
    calibs: Vec<CalibRecord>,
    /// Sibling blob file name, when the scene carries imagery.
    images: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageBlobHeader {
    views: usize,
    channels: usize,
    height: usize,
    width: usize,
}

fn write_image_blob(path: &Path, images: &[ImageRaster]) -> Result<()> {
    let header = ImageBlobHeader {
        views: images.len(),
        channels: images.first().map_or(0, |i| i.channels),
        height: images.first().map_or(0, |i| i.height),
        width: images.first().map_or(0, |i| i.width),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for img in images {
        for v in &img.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_image_blob(path: &Path) -> Result<Vec<ImageRaster>> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::shape("image blob missing header line"))?;
    let header: ImageBlobHeader = serde_json::from_slice(&bytes[..nl])?;
    let payload = &bytes[nl + 1..];
    let per_view = header.channels * header.height * header.width;
    if payload.len() != header.views * per_view * 4 {
        return Err(Error::shape(format!(
            "image blob payload size {} != expected {}",
            payload.len(),
            header.views * per_view * 4
        )));
    }
    let mut images = Vec::with_capacity(header.views);
    for v in 0..header.views {
        let start = v * per_view * 4;
        let data: Vec<f32> = payload[start..start + per_view * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        images.push(ImageRaster {
            channels: header.channels,
            height: header.height,
            width: header.width,
            data,
        });
    }
    Ok(images)
}

fn scene_doc(
    id: u64,
    points: &[[f64; 3]],
    boxes: &[Box3D],
    annotations: &[PointAnnotation],
    calibs: &[CameraCalib],
    images: Option<String>,
) -> SceneDoc {
    SceneDoc {
        id,
        points: points.iter().flatten().cloned().collect(),
        boxes: boxes.iter().map(BoxRecord::from_box).collect(),
        annotations: annotations
            .iter()
            .map(|a| AnnotationRecord {
                x: a.position[0],
                y: a.position[1],
                z: a.position[2],
                category: a.category,
            })
            .collect(),
        calibs: calibs.iter().map(CalibRecord::from_calib).collect(),
        images,
    }
}

/// Writes `<stem>.json` plus `<stem>.images.bin`, returning the JSON path.
/// When `strip_boxes` is set the document carries no ground-truth boxes
/// (weak-split persistence).
pub fn write_scene(scene: &Scene, dir: &Path, stem: &str, strip_boxes: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let blob_name = format!("{stem}.images.bin");
    write_image_blob(&dir.join(&blob_name), &scene.images)?;
    let boxes: &[Box3D] = if strip_boxes { &[] } else { &scene.boxes };
    let doc = scene_doc(scene.id, &scene.points, boxes, &scene.annotations, &scene.calibs, Some(blob_name));
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_vec(&doc)?)?;
    Ok(path)
}

fn doc_to_parts(
    doc: SceneDoc,
    base: &Path,
) -> Result<(u64, Vec<[f64; 3]>, Vec<ImageRaster>, Vec<CameraCalib>, Vec<Box3D>, Vec<PointAnnotation>)> {
    if doc.points.len() % 3 != 0 {
        return Err(Error::shape("point list length must be a multiple of 3"));
    }
    let points: Vec<[f64; 3]> =
        doc.points.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let images = match &doc.images {
        Some(name) => read_image_blob(&base.join(name))?,
        None => Vec::new(),
    };
    let calibs: Vec<CameraCalib> =
        doc.calibs.iter().map(|c| c.to_calib()).collect::<Result<_>>()?;
    let boxes: Vec<Box3D> = doc.boxes.iter().map(|b| b.to_box(1.0)).collect::<Result<_>>()?;
    let annotations: Vec<PointAnnotation> = doc
        .annotations
        .iter()
        .map(|a| PointAnnotation { position: [a.x, a.y, a.z], category: a.category })
        .collect();
    Ok((doc.id, points, images, calibs, boxes, annotations))
}

/// Loads a fully labeled scene document.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let doc: SceneDoc = serde_json::from_slice(
        &fs::read(path).map_err(|_| Error::missing(format!("scene file {}", path.display())))?,
    )?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let (id, points, images, calibs, boxes, annotations) = doc_to_parts(doc, base)?;
    let scene = Scene { id, points, images, calibs, boxes, annotations };
    scene.validate()?;
    Ok(scene)
}

/// Loads a weak scene document. Any boxes present in the file are ignored;
/// the weak loader never exposes ground truth.
pub fn load_weak_scene(path: &Path) -> Result<WeakScene> {
    let doc: SceneDoc = serde_json::from_slice(
        &fs::read(path).map_err(|_| Error::missing(format!("scene file {}", path.display())))?,
    )?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let (id, points, images, calibs, _boxes, annotations) = doc_to_parts(doc, base)?;
    Ok(WeakScene { id, points, images, calibs, annotations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Labeled,
    Weak,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: u64,
    pub path: String,
    pub split: SplitKind,
}

/// Dataset manifest: scene files with split assignments. The weak split's
/// ground truth lives in `weak_gt_path`, which only
/// [`load_weak_ground_truth`] reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split_ratio: f64,
    pub scenes: Vec<SceneEntry>,
    pub weak_gt_path: Option<String>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|_| Error::missing(format!("dataset manifest {}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn labeled_paths(&self, base: &Path) -> Vec<PathBuf> {
        self.scenes
            .iter()
            .filter(|e| e.split == SplitKind::Labeled)
            .map(|e| base.join(&e.path))
            .collect()
    }

    pub fn weak_paths(&self, base: &Path) -> Vec<PathBuf> {
        self.scenes
            .iter()
            .filter(|e| e.split == SplitKind::Weak)
            .map(|e| base.join(&e.path))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeakGtRecord {
    scene_id: u64,
    boxes: Vec<BoxRecord>,
}

/// Persists the weak split's ground truth for evaluation only.
pub fn write_weak_ground_truth(path: &Path, entries: &[(u64, Vec<Box3D>)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = Vec::new();
    for (id, boxes) in entries {
        let rec = WeakGtRecord {
            scene_id: *id,
            boxes: boxes.iter().map(BoxRecord::from_box).collect(),
        };
        out.extend_from_slice(&serde_json::to_vec(&rec)?);
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Evaluation-path loader for the hidden weak-split ground truth.
pub fn load_weak_ground_truth(path: &Path) -> Result<Vec<(u64, Vec<Box3D>)>> {
    let f = fs::File::open(path)
        .map_err(|_| Error::missing(format!("weak ground-truth store {}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WeakGtRecord = serde_json::from_str(&line)?;
        let boxes: Vec<Box3D> = rec.boxes.iter().map(|b| b.to_box(1.0)).collect::<Result<_>>()?;
        out.push((rec.scene_id, boxes));
    }
    Ok(out)
}

/// One pseudo-label record: a weak scene id and its teacher boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub scene_id: u64,
    pub boxes: Vec<ScoredBoxRecord>,
}

pub fn write_pseudo_labels(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(&serde_json::to_vec(r)?);
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    let f = fs::File::open(path)
        .map_err(|_| Error::missing(format!("pseudo-label file {}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Append-per-record JSONL writer used by the training loops.
pub struct JsonlLogger {
    file: fs::File,
}

impl JsonlLogger {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(JsonlLogger { file: fs::File::create(path)? })
    }

    pub fn log<T: Serialize>(&mut self, record: &T) -> Result<()> {
        self.file.write_all(&serde_json::to_vec(record)?)?;
        self.file.write_all(b"\n")?;
        Ok(())
    }
}
