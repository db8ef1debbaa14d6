//! Three-stage workflow orchestration: dataset generation and splitting,
//! teacher training, pseudo-label generation, student training, evaluation,
//! plot emission, and the labeled-ratio trend grid. Every stage reads its
//! inputs from persisted artifacts so stages can run in fresh processes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{
    load_scene, load_weak_scene, read_pseudo_labels, write_pseudo_labels, write_scene,
    write_weak_ground_truth, DatasetManifest, JsonlLogger, SceneEntry, SplitKind,
};
use crate::metrics::{default_range_bins, MetricsReport, RangeBin};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::scene::{generate_scene, split_dataset, SceneConfig};
use crate::student::{
    evaluate_student, train_student, PseudoScene, SslMode, StudentConfig, StudentModel,
    StudentTrainConfig,
};
use crate::teacher::{
    evaluate_teacher, generate_pseudo_labels, train_teacher, TeacherConfig, TeacherModel,
    TeacherTrainConfig,
};
use crate::types::Scene;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; all stage seeds derive from it.
    pub seed: u64,
    pub n_train_scenes: usize,
    pub n_val_scenes: usize,
    pub n_test_scenes: usize,
    pub scene: SceneConfig,
    /// Fraction of training scenes that keep full box labels.
    pub split_ratio: f64,
    pub teacher: TeacherConfig,
    pub teacher_train: TeacherTrainConfig,
    pub student: StudentConfig,
    pub student_train: StudentTrainConfig,
    /// Train the student on pseudo labels (false = labeled-only baseline).
    pub use_pseudo: bool,
    pub bins: Vec<RangeBin>,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1234,
            n_train_scenes: 200,
            n_val_scenes: 40,
            n_test_scenes: 40,
            scene: SceneConfig::default(),
            split_ratio: 0.10,
            teacher: TeacherConfig::default(),
            teacher_train: TeacherTrainConfig::default(),
            student: StudentConfig::default(),
            student_train: StudentTrainConfig::default(),
            use_pseudo: true,
            bins: default_range_bins(),
            out_dir: "out".to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio <= 1.0) {
            return Err(Error::config(format!("split_ratio must be in (0,1], got {}", self.split_ratio)));
        }
        if self.teacher_train.steps == 0 || self.student_train.steps == 0 {
            return Err(Error::config("step counts must be positive"));
        }
        if self.n_train_scenes == 0 {
            return Err(Error::config("need at least one training scene"));
        }
        self.scene.validate()?;
        self.teacher.validate()?;
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out(&self) -> &Path {
        Path::new(&self.out_dir)
    }

    /// Canonical hash of the configuration (hex SHA-256 of its JSON form).
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_string(&hasher.finalize())
    }

    // Derived seeds keep every stage independent yet reproducible.
    fn train_scene_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }
    fn val_scene_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(1_000_000 + i as u64)
    }
    fn test_scene_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(2_000_000 + i as u64)
    }
    fn teacher_init_seed(&self) -> u64 {
        self.seed.wrapping_add(11)
    }
    fn student_init_seed(&self) -> u64 {
        self.seed.wrapping_add(21)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// Artifact layout.
pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out().join("data")
}
pub fn train_manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    data_dir(cfg).join("manifest.json")
}
pub fn val_manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    data_dir(cfg).join("val_manifest.json")
}
pub fn test_manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    data_dir(cfg).join("test_manifest.json")
}
pub fn teacher_ckpt_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out().join("teacher").join("ckpt")
}
pub fn teacher_report_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out().join("teacher").join("val_report.json")
}
pub fn pseudo_label_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out().join("pseudo").join("labels.jsonl")
}
pub fn student_ckpt_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out().join("student").join("ckpt")
}
pub fn student_report_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out().join("student").join("test_report.json")
}
pub fn run_manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out().join("run_manifest.json")
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Stage record in the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub unix_time: u64,
    pub artifacts: Vec<String>,
}

/// Run-level bookkeeping: config hash, stage timestamps, artifact paths.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn load_or_new(cfg: &ExperimentConfig) -> Self {
        let path = run_manifest_path(cfg);
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(mut m) = serde_json::from_slice::<RunManifest>(&bytes) {
                m.config_hash = cfg.config_hash();
                return m;
            }
        }
        RunManifest {
            config_hash: cfg.config_hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: vec![],
        }
    }

    fn record(&mut self, cfg: &ExperimentConfig, stage: &str, artifacts: &[&Path]) -> Result<()> {
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            unix_time: unix_now(),
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        });
        for p in artifacts {
            if !p.exists() {
                return Err(Error::missing(format!("stage {stage} artifact {}", p.display())));
            }
        }
        fs::create_dir_all(cfg.out())?;
        fs::write(run_manifest_path(cfg), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Generates train/val/test scenes, splits the training pool, and persists
/// everything: weak scenes are stored without boxes, whose ground truth goes
/// to the evaluation-only store.
pub fn stage_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let dir = data_dir(cfg);
    let scenes_dir = dir.join("scenes");
    fs::create_dir_all(&scenes_dir)?;

    let gen = |seeds: Vec<u64>| -> Result<Vec<Scene>> {
        seeds
            .par_iter()
            .map(|s| generate_scene(&cfg.scene, *s))
            .collect::<Result<Vec<_>>>()
    };
    let train = gen((0..cfg.n_train_scenes).map(|i| cfg.train_scene_seed(i)).collect())?;
    let val = gen((0..cfg.n_val_scenes).map(|i| cfg.val_scene_seed(i)).collect())?;
    let test = gen((0..cfg.n_test_scenes).map(|i| cfg.test_scene_seed(i)).collect())?;

    let split = split_dataset(train, cfg.split_ratio)?;
    let mut entries = Vec::new();
    for (i, s) in split.labeled.iter().enumerate() {
        let stem = format!("train_{i:04}");
        write_scene(s, &scenes_dir, &stem, false)?;
        entries.push(SceneEntry {
            id: s.id,
            path: format!("scenes/{stem}.json"),
            split: SplitKind::Labeled,
        });
    }
    for (i, w) in split.weak.iter().enumerate() {
        let stem = format!("train_{:04}", split.labeled.len() + i);
        // Weak scenes are persisted through a fully-labeled twin with boxes
        // stripped; the loader type guarantees the boxes stay invisible.
        let as_scene = Scene {
            id: w.id,
            points: w.points.clone(),
            images: w.images.clone(),
            calibs: w.calibs.clone(),
            boxes: vec![],
            annotations: w.annotations.clone(),
        };
        write_scene(&as_scene, &scenes_dir, &stem, true)?;
        entries.push(SceneEntry {
            id: w.id,
            path: format!("scenes/{stem}.json"),
            split: SplitKind::Weak,
        });
    }
    write_weak_ground_truth(&dir.join("weak_gt.jsonl"), split.weak_ground_truth_for_eval())?;
    DatasetManifest {
        seed: cfg.seed,
        split_ratio: cfg.split_ratio,
        scenes: entries,
        weak_gt_path: Some("weak_gt.jsonl".to_string()),
    }
    .save(&train_manifest_path(cfg))?;

    for (name, pool, manifest_path) in [
        ("val", &val, val_manifest_path(cfg)),
        ("test", &test, test_manifest_path(cfg)),
    ] {
        let mut entries = Vec::new();
        for (i, s) in pool.iter().enumerate() {
            let stem = format!("{name}_{i:04}");
            write_scene(s, &scenes_dir, &stem, false)?;
            entries.push(SceneEntry {
                id: s.id,
                path: format!("scenes/{stem}.json"),
                split: SplitKind::Labeled,
            });
        }
        DatasetManifest {
            seed: cfg.seed,
            split_ratio: 1.0,
            scenes: entries,
            weak_gt_path: None,
        }
        .save(&manifest_path)?;
    }

    let mut manifest = RunManifest::load_or_new(cfg);
    manifest.record(
        cfg,
        "gen-data",
        &[&train_manifest_path(cfg), &val_manifest_path(cfg), &test_manifest_path(cfg)],
    )
}

fn load_manifest_scenes(manifest_path: &Path, split: Option<SplitKind>) -> Result<Vec<Scene>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .scenes
        .iter()
        .filter(|e| split.map_or(true, |s| e.split == s))
        .map(|e| load_scene(&base.join(&e.path)))
        .collect()
}

fn load_weak_pool(manifest_path: &Path) -> Result<Vec<crate::types::WeakScene>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .scenes
        .iter()
        .filter(|e| e.split == SplitKind::Weak)
        .map(|e| load_weak_scene(&base.join(&e.path)))
        .collect()
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let bytes =
        fs::read(path).map_err(|_| Error::missing(format!("report {}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Stage 1: train the point-to-box teacher on the labeled split only and
/// validate it on the held-out validation scenes.
pub fn stage_train_teacher(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let labeled = load_manifest_scenes(&train_manifest_path(cfg), Some(SplitKind::Labeled))?;
    if labeled.is_empty() {
        return Err(Error::config("teacher training requires a non-empty labeled split"));
    }
    let mut model = TeacherModel::new(cfg.teacher.clone(), cfg.teacher_init_seed())?;
    let mut tc = cfg.teacher_train.clone();
    tc.seed = cfg.seed.wrapping_add(12);
    tc.annotation_sigma_frac = cfg.scene.annotation_sigma_frac;
    let mut logger = JsonlLogger::create(&cfg.out().join("teacher").join("train_log.jsonl"))?;
    train_teacher(&mut model, &labeled, &tc, Some(&mut logger))?;
    save_checkpoint(&model.store, &teacher_ckpt_path(cfg))?;
    fs::write(
        cfg.out().join("teacher").join("model_config.json"),
        serde_json::to_vec_pretty(&cfg.teacher)?,
    )?;

    let val = load_manifest_scenes(&val_manifest_path(cfg), None)?;
    let report = evaluate_teacher(&model, &val)?;
    write_report(&teacher_report_path(cfg), &report)?;
    let mut manifest = RunManifest::load_or_new(cfg);
    manifest.record(
        cfg,
        "train-teacher",
        &[&teacher_ckpt_path(cfg).with_extension("bin"), &teacher_report_path(cfg)],
    )?;
    Ok(report)
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<TeacherModel> {
    let store = load_checkpoint(&teacher_ckpt_path(cfg))?;
    let cfg_path = cfg.out().join("teacher").join("model_config.json");
    let tcfg: TeacherConfig = match fs::read(&cfg_path) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => cfg.teacher.clone(),
    };
    TeacherModel::from_store(tcfg, store)
}

/// Stage 2: emit one pseudo-label record per weak scene.
pub fn stage_generate_pseudo(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let model = load_teacher(cfg)?;
    let weak = load_weak_pool(&train_manifest_path(cfg))?;
    if weak.is_empty() {
        return Err(Error::config("no weak scenes to pseudo-label"));
    }
    let records = generate_pseudo_labels(&model, &weak);
    debug_assert_eq!(records.len(), weak.len());
    let path = pseudo_label_path(cfg);
    write_pseudo_labels(&path, &records)?;
    let mut manifest = RunManifest::load_or_new(cfg);
    manifest.record(cfg, "gen-pseudo", &[&path])?;
    Ok(path)
}

fn assemble_pseudo_scenes(cfg: &ExperimentConfig) -> Result<Vec<PseudoScene>> {
    let weak = load_weak_pool(&train_manifest_path(cfg))?;
    let records = read_pseudo_labels(&pseudo_label_path(cfg))?;
    if records.len() != weak.len() {
        return Err(Error::config(format!(
            "pseudo-label file covers {} scenes but the weak split has {}",
            records.len(),
            weak.len()
        )));
    }
    let mut by_id = std::collections::HashMap::new();
    for r in &records {
        by_id.insert(r.scene_id, r);
    }
    weak.into_iter()
        .map(|w| {
            let rec = by_id.remove(&w.id).ok_or_else(|| {
                Error::config(format!("pseudo-label file missing weak scene {}", w.id))
            })?;
            let boxes = rec.boxes.iter().map(|b| b.to_box()).collect::<Result<Vec<_>>>()?;
            Ok(PseudoScene { id: w.id, points: w.points, annotations: w.annotations, boxes })
        })
        .collect()
}

/// Stage 3: train the student on labeled plus pseudo-labeled scenes (or
/// labeled only in baseline mode) and evaluate on the test split.
pub fn stage_train_student(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let labeled = load_manifest_scenes(&train_manifest_path(cfg), Some(SplitKind::Labeled))?;
    let pseudo = if cfg.use_pseudo { assemble_pseudo_scenes(cfg)? } else { Vec::new() };
    let mut model = StudentModel::new(cfg.student.clone(), cfg.student_init_seed())?;
    let mut tc = cfg.student_train.clone();
    tc.seed = cfg.seed.wrapping_add(22);
    let mut logger = JsonlLogger::create(&cfg.out().join("student").join("train_log.jsonl"))?;
    train_student(&mut model, &labeled, &pseudo, &tc, Some(&mut logger))?;
    save_checkpoint(&model.store, &student_ckpt_path(cfg))?;
    fs::write(
        cfg.out().join("student").join("model_config.json"),
        serde_json::to_vec_pretty(&cfg.student)?,
    )?;

    let report = evaluate_on_test(cfg, &model)?;
    write_report(&student_report_path(cfg), &report)?;
    let mut manifest = RunManifest::load_or_new(cfg);
    manifest.record(
        cfg,
        "train-student",
        &[&student_ckpt_path(cfg).with_extension("bin"), &student_report_path(cfg)],
    )?;
    Ok(report)
}

fn evaluate_on_test(cfg: &ExperimentConfig, model: &StudentModel) -> Result<MetricsReport> {
    let test = load_manifest_scenes(&test_manifest_path(cfg), None)?;
    evaluate_student(model, &test, &cfg.bins)
}

/// Re-runs evaluation from persisted student artifacts.
pub fn stage_evaluate(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let store = load_checkpoint(&student_ckpt_path(cfg))?;
    let cfg_path = cfg.out().join("student").join("model_config.json");
    let scfg: StudentConfig = match fs::read(&cfg_path) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => cfg.student.clone(),
    };
    let model = StudentModel::from_store(scfg, store)?;
    let report = evaluate_on_test(cfg, &model)?;
    write_report(&student_report_path(cfg), &report)?;
    Ok(report)
}

/// Fixed-width table of one report, for terminal output.
pub fn format_report_table(label: &str, r: &MetricsReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("{label:<24} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "mAP", "mATE", "mASE", "mAOE", "SPNDS"));
    s.push_str(&format!(
        "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
        "overall", r.map, r.mate, r.mase, r.maoe, r.spnds
    ));
    for b in &r.bins {
        let name = match b.range_max {
            Some(mx) => format!("[{:.0},{:.0})m", b.range_min, mx),
            None => format!("[{:.0},inf)m", b.range_min),
        };
        match &b.report {
            Some(rep) => s.push_str(&format!(
                "{name:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                rep.map, rep.mate, rep.mase, rep.maoe, rep.spnds
            )),
            None => s.push_str(&format!("{name:<24} {:>8} (no ground truth)\n", "-")),
        }
    }
    s
}

/// One labeled-ratio x paradigm cell of the trend grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendCell {
    pub ratio: f64,
    pub paradigm: String,
    pub spnds: f64,
    pub map: f64,
    pub report_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendsSummary {
    pub master_seed: u64,
    pub cells: Vec<TrendCell>,
}

/// Runs the full ratio-grid experiment: {2%, 5%, 10%} x {labeled-only
/// baseline, pseudo-label pipeline}. Each cell is a complete three-stage run
/// under its own output directory; metric JSONs land at deterministic paths.
pub fn reproduce_trends(base: &ExperimentConfig) -> Result<TrendsSummary> {
    base.validate()?;
    let mut cells = Vec::new();
    let trends_dir = base.out().join("trends");
    fs::create_dir_all(&trends_dir)?;
    for &ratio in &[0.02, 0.05, 0.10] {
        for paradigm in ["baseline", "ours"] {
            let mut cfg = base.clone();
            cfg.split_ratio = ratio;
            cfg.use_pseudo = paradigm == "ours";
            cfg.student.ssl_mode = if paradigm == "ours" { cfg.student.ssl_mode } else { SslMode::None };
            let cell_dir = trends_dir.join(format!("r{:02}_{paradigm}", (ratio * 100.0).round() as u32));
            cfg.out_dir = cell_dir.display().to_string();
            stage_gen_data(&cfg)?;
            stage_train_teacher(&cfg)?;
            if cfg.use_pseudo {
                stage_generate_pseudo(&cfg)?;
            }
            let report = stage_train_student(&cfg)?;
            cells.push(TrendCell {
                ratio,
                paradigm: paradigm.to_string(),
                spnds: report.spnds,
                map: report.map,
                report_path: student_report_path(&cfg).display().to_string(),
            });
        }
    }
    let summary = TrendsSummary { master_seed: base.seed, cells };
    fs::write(trends_dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;

    // Range plots comparing the grid's reports.
    let mut labeled_reports = Vec::new();
    for cell in &summary.cells {
        let report = read_report(Path::new(&cell.report_path))?;
        labeled_reports.push((format!("r{:.0}%-{}", cell.ratio * 100.0, cell.paradigm), report));
    }
    crate::plot::emit_plots(&labeled_reports, &trends_dir.join("plots"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small config for pipeline plumbing tests (not for accuracy).
    pub(crate) fn small_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 99;
        cfg.n_train_scenes = 10;
        cfg.n_val_scenes = 3;
        cfg.n_test_scenes = 3;
        cfg.scene = SceneConfig {
            n_objects_min: 2,
            n_objects_max: 3,
            r_min: 5.0,
            r_max: 30.0,
            n_cameras: 2,
            image_height: 12,
            image_width: 20,
            focal: 12.0,
            base_density: 2000.0,
            clutter_points: 50,
            extent: 36.0,
            ..Default::default()
        };
        cfg.teacher.bev_spec = crate::geometry::BevSpec::new(-36.0, 36.0, -36.0, 36.0, 3.0).unwrap();
        cfg.teacher.embed_dim = 8;
        cfg.teacher.levels = 1;
        cfg.teacher.grid_k = 2;
        cfg.teacher_train.steps = 12;
        cfg.student.bev_spec = cfg.teacher.bev_spec.clone();
        cfg.student.channels = 8;
        cfg.student_train.steps = 12;
        cfg.out_dir = dir.display().to_string();
        cfg
    }

    #[test]
    fn full_pipeline_stages_run_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        stage_gen_data(&cfg).unwrap();
        // Labeled split: ceil(0.10 * 10) = 1 labeled, 9 weak.
        let manifest = DatasetManifest::load(&train_manifest_path(&cfg)).unwrap();
        let n_labeled =
            manifest.scenes.iter().filter(|e| e.split == SplitKind::Labeled).count();
        assert_eq!(n_labeled, 1);
        assert_eq!(manifest.scenes.len(), 10);

        stage_train_teacher(&cfg).unwrap();
        assert!(teacher_ckpt_path(&cfg).with_extension("bin").exists());
        let pseudo_path = stage_generate_pseudo(&cfg).unwrap();
        let records = read_pseudo_labels(&pseudo_path).unwrap();
        assert_eq!(records.len(), 9, "one record per weak scene");

        let report = stage_train_student(&cfg).unwrap();
        assert!(report.spnds.is_finite());
        assert!(student_report_path(&cfg).exists());
        let manifest: RunManifest =
            serde_json::from_slice(&fs::read(run_manifest_path(&cfg)).unwrap()).unwrap();
        assert_eq!(manifest.stages.len(), 4);
        for s in &manifest.stages {
            for a in &s.artifacts {
                assert!(Path::new(a).exists(), "manifest lists a missing artifact {a}");
            }
        }
    }

    #[test]
    fn pseudo_regeneration_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        stage_gen_data(&cfg).unwrap();
        stage_train_teacher(&cfg).unwrap();
        let p = stage_generate_pseudo(&cfg).unwrap();
        let bytes1 = fs::read(&p).unwrap();
        stage_generate_pseudo(&cfg).unwrap();
        assert_eq!(bytes1, fs::read(&p).unwrap());
    }

    #[test]
    fn missing_artifacts_abort() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        // Teacher before data: missing manifest.
        assert!(matches!(stage_train_teacher(&cfg), Err(Error::MissingArtifact(_))));
        stage_gen_data(&cfg).unwrap();
        // Pseudo before teacher checkpoint.
        assert!(matches!(stage_generate_pseudo(&cfg), Err(Error::MissingArtifact(_))));
        // Student with use_pseudo but no pseudo file.
        assert!(matches!(stage_train_student(&cfg), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn config_validation_and_override_flow() {
        let cfg = ExperimentConfig { split_ratio: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            teacher_train: TeacherTrainConfig { steps: 0, ..Default::default() },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let good = ExperimentConfig::default();
        assert!(good.validate().is_ok());
        // Hash changes with the config.
        let mut other = ExperimentConfig::default();
        other.seed += 1;
        assert_ne!(good.config_hash(), other.config_hash());
    }

    #[test]
    fn weak_scene_files_carry_no_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        stage_gen_data(&cfg).unwrap();
        let manifest = DatasetManifest::load(&train_manifest_path(&cfg)).unwrap();
        let base = data_dir(&cfg);
        for e in manifest.scenes.iter().filter(|e| e.split == SplitKind::Weak) {
            let raw: serde_json::Value =
                serde_json::from_slice(&fs::read(base.join(&e.path)).unwrap()).unwrap();
            assert_eq!(raw["boxes"].as_array().unwrap().len(), 0);
        }
        // The hidden store exists and is only reachable through the eval API.
        let gt = crate::io::load_weak_ground_truth(&base.join("weak_gt.jsonl")).unwrap();
        assert_eq!(gt.len(), 9);
        assert!(gt.iter().all(|(_, boxes)| !boxes.is_empty()));
    }
}
