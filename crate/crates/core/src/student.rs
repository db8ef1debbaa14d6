//! The BEV student detector: pillar-scatter encoder, center-heatmap and
//! regression heads, peak decoding, and the point-guided feature-consistency
//! branch with weak/strong augmented pipelines and a stop-gradient target.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{BevEncoder, Fwd};
use crate::error::{Error, Result};
use crate::geometry::{bev_project, gaussian_bev_mask, BevAugmentation, BevSpec};
use crate::io::JsonlLogger;
use crate::metrics::{MetricsReport, RangeBin};
use crate::nn::{xavier, zeros, Adam, ParamBinding, ParamStore};
use crate::types::{wrap_angle, Box3D, Detection, PointAnnotation, Scene};

/// Which consistency objective the student trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslMode {
    /// No self-supervised branch.
    None,
    /// Uniform per-cell consistency over the whole map.
    Unmasked,
    /// Consistency re-weighted by the point-annotation Gaussian mask.
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub channels: usize,
    pub n_categories: usize,
    pub bev_spec: BevSpec,
    pub ssl_mode: SslMode,
    /// Weight of the consistency term.
    pub ssl_weight: f64,
    /// Gaussian sigma (cells) for the point-guided mask.
    pub mask_sigma: f64,
    /// Gaussian sigma (cells) for heatmap training targets.
    pub target_sigma: f64,
    pub heatmap_threshold: f64,
    pub max_detections: usize,
    /// Keep probability for strong-augmentation point dropout.
    pub strong_dropout_keep: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            channels: 16,
            n_categories: 3,
            bev_spec: BevSpec::new(-52.0, 52.0, -52.0, 52.0, 2.0).unwrap(),
            ssl_mode: SslMode::Masked,
            ssl_weight: 1.0,
            mask_sigma: 2.0,
            target_sigma: 2.0,
            heatmap_threshold: 0.10,
            max_detections: 60,
            strong_dropout_keep: 0.7,
        }
    }
}

/// A weak scene paired with its teacher pseudo boxes.
#[derive(Debug, Clone)]
pub struct PseudoScene {
    pub id: u64,
    pub points: Vec<[f64; 3]>,
    pub annotations: Vec<PointAnnotation>,
    pub boxes: Vec<Box3D>,
}

pub struct StudentModel {
    pub cfg: StudentConfig,
    pub store: ParamStore,
}

impl StudentModel {
    pub fn new(cfg: StudentConfig, seed: u64) -> Result<Self> {
        if cfg.channels == 0 || cfg.n_categories == 0 {
            return Err(Error::config("student channels/categories must be positive"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BevEncoder::new("bev_enc", cfg.channels).init_params(&mut store, &mut rng);
        let c = cfg.channels;
        let ncat = cfg.n_categories;
        store.get_or_init("head.heat.w", &[ncat, c, 1, 1], |d| xavier(&[ncat, c, 1, 1], d), &mut rng);
        // Bias starts low so the initial heatmap is quiet.
        store.get_or_init("head.heat.b", &[ncat], |_| ArrayD::from_elem(IxDyn(&[ncat]), -4.0), &mut rng);
        store.get_or_init("head.reg.w", &[8, c, 1, 1], |d| xavier(&[8, c, 1, 1], d), &mut rng);
        store.get_or_init("head.reg.b", &[8], |_| zeros(&[8]), &mut rng);
        Ok(StudentModel { cfg, store })
    }

    pub fn from_store(cfg: StudentConfig, store: ParamStore) -> Result<Self> {
        Ok(StudentModel { cfg, store })
    }

    /// Trunk BEV features for a point cloud (single level).
    fn features(&self, fwd: &Fwd<'_>, points: &[[f64; 3]]) -> Var {
        let enc = BevEncoder::new("bev_enc", self.cfg.channels);
        enc.forward(fwd, points, &self.cfg.bev_spec, 1).remove(0)
    }

    /// Head maps from trunk features: category heatmap logits and the
    /// 8-channel regression map (dx, dy, z, log dims, sin, cos).
    fn heads(&self, fwd: &Fwd<'_>, feat: &Var) -> (Var, Var) {
        let heat = feat.conv2d(&fwd.p("head.heat.w"), &fwd.p("head.heat.b"), 1, 0);
        let reg = feat.conv2d(&fwd.p("head.reg.w"), &fwd.p("head.reg.b"), 1, 0);
        (heat, reg)
    }

    /// Public feature-extraction operation (values, fresh tape).
    pub fn extract_bev_features(&self, points: &[[f64; 3]]) -> Array3<f64> {
        let graph = Graph::new();
        let binding = ParamBinding::new(&graph);
        let fwd = Fwd { graph: &graph, binding: &binding, store: &self.store };
        self.features(&fwd, points)
            .value()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
    }

    /// Full detection pass on one point cloud.
    pub fn detect(&self, points: &[[f64; 3]]) -> Vec<Detection> {
        let graph = Graph::new();
        let binding = ParamBinding::new(&graph);
        let fwd = Fwd { graph: &graph, binding: &binding, store: &self.store };
        let feat = self.features(&fwd, points);
        let (heat, reg) = self.heads(&fwd, &feat);
        let probs = heat.sigmoid().value().into_dimensionality::<ndarray::Ix3>().unwrap();
        let reg = reg.value().into_dimensionality::<ndarray::Ix3>().unwrap();
        decode_peaks(
            &probs,
            &reg,
            &self.cfg.bev_spec,
            self.cfg.heatmap_threshold,
            self.cfg.max_detections,
        )
    }
}

/// Local-maximum peak extraction (3x3 window) and box decoding from
/// per-category probability and regression maps.
pub fn decode_peaks(
    probs: &Array3<f64>,
    reg: &Array3<f64>,
    spec: &BevSpec,
    threshold: f64,
    max_detections: usize,
) -> Vec<Detection> {
    let (ncat, h, w) = probs.dim();
    let mut cands: Vec<(f64, usize, usize, usize)> = Vec::new();
    for cat in 0..ncat {
        for i in 0..h {
            for j in 0..w {
                let p = probs[[cat, i, j]];
                if p <= threshold {
                    continue;
                }
                let mut is_peak = true;
                'nb: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        if probs[[cat, ni as usize, nj as usize]] > p {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if is_peak {
                    cands.push((p, cat, i, j));
                }
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    cands.truncate(max_detections);
    let mut out = Vec::with_capacity(cands.len());
    for (p, cat, i, j) in cands {
        let dx = reg[[0, i, j]];
        let dy = reg[[1, i, j]];
        let x = spec.x_min + (j as f64 + 0.5 + dx) * spec.resolution;
        let y = spec.y_min + (i as f64 + 0.5 + dy) * spec.resolution;
        let z = reg[[2, i, j]];
        let dims = [reg[[3, i, j]].exp(), reg[[4, i, j]].exp(), reg[[5, i, j]].exp()];
        let yaw = wrap_angle(reg[[6, i, j]].atan2(reg[[7, i, j]]));
        out.push(Detection::new(Box3D {
            center: [x, y, z],
            dims,
            yaw,
            category: cat as u32,
            score: p.clamp(0.0, 1.0),
        }));
    }
    out
}

/// Training targets for one scene: the per-category heatmap (exact 1.0 at
/// each object's center cell, Gaussian elsewhere, max-composited) and the
/// regression rows at those cells.
fn build_targets(
    boxes: &[Box3D],
    spec: &BevSpec,
    sigma: f64,
    ncat: usize,
) -> (ArrayD<f64>, Vec<(usize, [f64; 8])>) {
    let (h, w) = (spec.rows(), spec.cols());
    let mut heat = ArrayD::zeros(IxDyn(&[ncat, h, w]));
    let mut reg_rows: Vec<(usize, [f64; 8])> = Vec::new();
    let mut taken = std::collections::HashSet::new();
    for b in boxes {
        let proj = bev_project(b.center, spec);
        if !proj.in_range {
            continue;
        }
        let (ci, cj) = (proj.row.floor() as usize, proj.col.floor() as usize);
        let cat = (b.category as usize).min(ncat - 1);
        for i in 0..h {
            for j in 0..w {
                let dr = (i as f64 + 0.5) - proj.row;
                let dc = (j as f64 + 0.5) - proj.col;
                let m = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
                if m > heat[[cat, i, j]] {
                    heat[[cat, i, j]] = m;
                }
            }
        }
        heat[[cat, ci, cj]] = 1.0;
        if taken.insert((ci, cj)) {
            reg_rows.push((
                ci * w + cj,
                [
                    proj.col - (cj as f64 + 0.5),
                    proj.row - (ci as f64 + 0.5),
                    b.center[2],
                    b.dims[0].ln(),
                    b.dims[1].ln(),
                    b.dims[2].ln(),
                    b.yaw.sin(),
                    b.yaw.cos(),
                ],
            ));
        }
    }
    (heat, reg_rows)
}

/// Penalty-reduced focal loss on the sigmoid heatmap plus L1 regression at
/// object center cells.
fn detection_loss(
    model: &StudentModel,
    fwd: &Fwd<'_>,
    points: &[[f64; 3]],
    boxes: &[Box3D],
) -> (Var, f64, f64) {
    let graph = fwd.graph;
    let feat = model.features(fwd, points);
    let (heat_logits, reg) = model.heads(fwd, &feat);
    let spec = &model.cfg.bev_spec;
    let (h, w) = (spec.rows(), spec.cols());
    let ncat = model.cfg.n_categories;
    let (target, reg_rows) = build_targets(boxes, spec, model.cfg.target_sigma, ncat);

    let mut pos_mask = ArrayD::zeros(IxDyn(&[ncat, h, w]));
    let mut neg_w = ArrayD::zeros(IxDyn(&[ncat, h, w]));
    let mut n_pos = 0usize;
    for c in 0..ncat {
        for i in 0..h {
            for j in 0..w {
                let y = target[[c, i, j]];
                if y >= 1.0 {
                    pos_mask[[c, i, j]] = 1.0;
                    n_pos += 1;
                } else {
                    neg_w[[c, i, j]] = (1.0 - y).powi(4);
                }
            }
        }
    }
    let pos_mask = graph.var(pos_mask);
    let neg_w = graph.var(neg_w);
    let p = heat_logits.sigmoid();
    let one_minus_p = p.neg().add_scalar(1.0);
    let pos_term = pos_mask
        .mul(&one_minus_p.pow_const(2.0))
        .mul(&p.ln_clamped(1e-12));
    let neg_term = neg_w
        .mul(&p.pow_const(2.0))
        .mul(&one_minus_p.ln_clamped(1e-12));
    let heat_loss = pos_term
        .sum_all()
        .add(&neg_term.sum_all())
        .scale(-1.0 / n_pos.max(1) as f64);

    let reg_loss = if reg_rows.is_empty() {
        graph.scalar(0.0)
    } else {
        let flat = reg.reshape(&[8, h * w]).t(); // [hw, 8]
        let rows: Vec<Var> = reg_rows.iter().map(|(idx, _)| flat.narrow(0, *idx, 1)).collect();
        let pred = graph.concat(0, &rows); // [n, 8]
        let mut tvals = Vec::with_capacity(reg_rows.len() * 8);
        for (_, t) in &reg_rows {
            tvals.extend_from_slice(t);
        }
        let t = graph.var(ArrayD::from_shape_vec(IxDyn(&[reg_rows.len(), 8]), tvals).unwrap());
        pred.sub(&t).abs().sum_axis(1).mean_all()
    };

    let total = heat_loss.add(&reg_loss);
    let hv = heat_loss.scalar_value();
    let rv = reg_loss.scalar_value();
    (total, hv, rv)
}

/// Point-guided consistency loss between two aligned BEV feature maps.
///
/// The weak branch is detached inside (constant target). With a mask:
/// `sum_ij M_ij * ||f_w - f_s||_2 / max(sum M, eps)`; an all-zero mask gives
/// exactly 0. Without a mask: the mean per-cell L2 norm.
pub fn ssl_consistency_loss(f_weak: &Var, f_strong: &Var, mask: Option<&Array2<f64>>) -> Var {
    let graph = f_strong.graph();
    let diff = f_weak.detach().sub(f_strong);
    let ssq = diff.mul(&diff).sum_axis(0); // [H, W]
    let norm = ssq.sqrt_guarded();
    match mask {
        Some(m) => {
            let msum: f64 = m.iter().sum();
            if msum <= 1e-12 {
                return graph.scalar(0.0);
            }
            let m_leaf = graph.var(m.clone().into_dyn());
            norm.mul(&m_leaf).sum_all().scale(1.0 / msum)
        }
        None => norm.mean_all(),
    }
}

fn sample_weak_aug(rng: &mut ChaCha8Rng) -> BevAugmentation {
    BevAugmentation { flip_x: rng.gen_bool(0.5), flip_y: rng.gen_bool(0.5), rot90: 0 }
}

fn sample_strong_aug(rng: &mut ChaCha8Rng) -> BevAugmentation {
    BevAugmentation {
        flip_x: rng.gen_bool(0.5),
        flip_y: rng.gen_bool(0.5),
        rot90: rng.gen_range(0..4u8),
    }
}

fn augment_points(points: &[[f64; 3]], aug: &BevAugmentation) -> Vec<[f64; 3]> {
    points.iter().map(|p| aug.transform_point(*p)).collect()
}

fn dropout_points(points: &[[f64; 3]], keep: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    points.iter().filter(|_| rng.gen_bool(keep)).cloned().collect()
}

/// Undo a BEV augmentation on a feature-map var (gradients flow through).
fn invert_aug_var(v: &Var, aug: &BevAugmentation) -> Var {
    let mut out = v.clone();
    for _ in 0..(4 - aug.rot90 % 4) % 4 {
        out = out.rot90_ccw_hw();
    }
    if aug.flip_y {
        out = out.flip(1);
    }
    if aug.flip_x {
        out = out.flip(2);
    }
    out
}

/// Consistency term for one pseudo scene under the configured SSL mode.
fn ssl_term(
    model: &StudentModel,
    fwd: &Fwd<'_>,
    ps: &PseudoScene,
    rng: &mut ChaCha8Rng,
) -> Var {
    let graph = fwd.graph;
    if model.cfg.ssl_mode == SslMode::None {
        return graph.scalar(0.0);
    }
    let weak_aug = sample_weak_aug(rng);
    let strong_aug = sample_strong_aug(rng);
    let weak_pts = augment_points(&ps.points, &weak_aug);
    let strong_pts = dropout_points(
        &augment_points(&ps.points, &strong_aug),
        model.cfg.strong_dropout_keep,
        rng,
    );
    let f_weak = invert_aug_var(&model.features(fwd, &weak_pts), &weak_aug);
    let f_strong = invert_aug_var(&model.features(fwd, &strong_pts), &strong_aug);
    match model.cfg.ssl_mode {
        SslMode::Masked => {
            let mask =
                gaussian_bev_mask(&ps.annotations, &model.cfg.bev_spec, model.cfg.mask_sigma)
                    .expect("valid mask sigma");
            ssl_consistency_loss(&f_weak, &f_strong, Some(&mask))
        }
        SslMode::Unmasked => ssl_consistency_loss(&f_weak, &f_strong, None),
        SslMode::None => unreachable!(),
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StudentStepBreakdown {
    pub total: f64,
    pub det_heat: f64,
    pub det_reg: f64,
    pub ssl: f64,
    pub lambda: f64,
}

/// One optimization step over a labeled batch and a pseudo batch. Detection
/// loss treats ground-truth and pseudo boxes uniformly; the consistency term
/// runs on pseudo scenes only, weighted by `ssl_weight`.
pub fn student_train_step(
    model: &mut StudentModel,
    opt: &mut Adam,
    labeled: &[&Scene],
    pseudo: &[&PseudoScene],
    rng: &mut ChaCha8Rng,
) -> Result<StudentStepBreakdown> {
    let graph = Graph::new();
    let binding = ParamBinding::new(&graph);
    let n_det = labeled.len() + pseudo.len();
    if n_det == 0 {
        return Err(Error::config("student step needs at least one scene"));
    }
    let fwd = Fwd { graph: &graph, binding: &binding, store: &model.store };

    let mut det_total: Option<Var> = None;
    let mut heat_acc = 0.0;
    let mut reg_acc = 0.0;
    let mut add_det = |loss: Var, det_total: &mut Option<Var>| {
        *det_total = Some(match det_total.take() {
            None => loss,
            Some(acc) => acc.add(&loss),
        });
    };
    for s in labeled {
        let (l, hv, rv) = detection_loss(model, &fwd, &s.points, &s.boxes);
        heat_acc += hv;
        reg_acc += rv;
        add_det(l, &mut det_total);
    }
    for ps in pseudo {
        let (l, hv, rv) = detection_loss(model, &fwd, &ps.points, &ps.boxes);
        heat_acc += hv;
        reg_acc += rv;
        add_det(l, &mut det_total);
    }
    let det = det_total.unwrap().scale(1.0 / n_det as f64);

    let lambda = model.cfg.ssl_weight;
    let ssl = if pseudo.is_empty() || model.cfg.ssl_mode == SslMode::None || lambda == 0.0 {
        graph.scalar(0.0)
    } else {
        let mut acc: Option<Var> = None;
        for ps in pseudo {
            let t = ssl_term(model, &fwd, ps, rng);
            acc = Some(match acc {
                None => t,
                Some(a) => a.add(&t),
            });
        }
        acc.unwrap().scale(1.0 / pseudo.len() as f64)
    };

    let total = det.add(&ssl.scale(lambda));
    let breakdown = StudentStepBreakdown {
        total: total.scalar_value(),
        det_heat: heat_acc / n_det as f64,
        det_reg: reg_acc / n_det as f64,
        ssl: ssl.scalar_value(),
        lambda,
    };
    let grads = total.backward();
    opt.apply(&mut model.store, &binding.gradients(&grads));
    Ok(breakdown)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for StudentTrainConfig {
    fn default() -> Self {
        StudentTrainConfig { steps: 900, lr: 2e-3, seed: 0 }
    }
}

#[derive(Debug, Serialize)]
struct StudentLogRecord {
    step: usize,
    total: f64,
    det_heat: f64,
    det_reg: f64,
    ssl: f64,
    lambda: f64,
    lr: f64,
}

/// Trains the student on labeled plus pseudo-labeled scenes, cycling both
/// pools deterministically.
pub fn train_student(
    model: &mut StudentModel,
    labeled: &[Scene],
    pseudo: &[PseudoScene],
    tc: &StudentTrainConfig,
    mut log: Option<&mut JsonlLogger>,
) -> Result<()> {
    if labeled.is_empty() && pseudo.is_empty() {
        return Err(Error::config("student training requires scenes"));
    }
    if tc.steps == 0 {
        return Err(Error::config("student step count must be positive"));
    }
    let mut opt = Adam::new(tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    for step in 0..tc.steps {
        let lab: Vec<&Scene> =
            if labeled.is_empty() { vec![] } else { vec![&labeled[step % labeled.len()]] };
        let ps: Vec<&PseudoScene> =
            if pseudo.is_empty() { vec![] } else { vec![&pseudo[step % pseudo.len()]] };
        let b = student_train_step(model, &mut opt, &lab, &ps, &mut rng)?;
        if let Some(logger) = log.as_deref_mut() {
            logger.log(&StudentLogRecord {
                step,
                total: b.total,
                det_heat: b.det_heat,
                det_reg: b.det_reg,
                ssl: b.ssl,
                lambda: b.lambda,
                lr: tc.lr,
            })?;
        }
    }
    Ok(())
}

/// Detection-and-evaluation pass over labeled scenes, with range bins.
pub fn evaluate_student(
    model: &StudentModel,
    scenes: &[Scene],
    bins: &[RangeBin],
) -> Result<MetricsReport> {
    use rayon::prelude::*;
    let per_scene: Vec<(Vec<Detection>, Vec<Box3D>)> = scenes
        .par_iter()
        .map(|s| (model.detect(&s.points), s.boxes.clone()))
        .collect();
    let views: Vec<(&[Detection], &[Box3D])> =
        per_scene.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
    crate::metrics::evaluate_with_bins(&views, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny_cfg() -> StudentConfig {
        StudentConfig {
            channels: 6,
            bev_spec: BevSpec::new(-16.0, 16.0, -16.0, 16.0, 2.0).unwrap(),
            ..Default::default()
        }
    }

    fn tiny_scene(seed: u64) -> Scene {
        let sc = SceneConfig {
            n_objects_min: 2,
            n_objects_max: 3,
            r_min: 4.0,
            r_max: 14.0,
            n_cameras: 1,
            image_height: 8,
            image_width: 12,
            focal: 8.0,
            base_density: 2000.0,
            clutter_points: 60,
            extent: 16.0,
            ..Default::default()
        };
        generate_scene(&sc, seed).unwrap()
    }

    fn pseudo_from(s: &Scene) -> PseudoScene {
        PseudoScene {
            id: s.id,
            points: s.points.clone(),
            annotations: s.annotations.clone(),
            boxes: s.boxes.clone(),
        }
    }

    #[test]
    fn ssl_loss_contract_values() {
        let graph = Graph::new();
        // 1x1x1 maps, values 3 and 5, mask 1 -> |3-5| = 2.
        let a = graph.var_from(&[1, 1, 1], vec![3.0]);
        let b = graph.var_from(&[1, 1, 1], vec![5.0]);
        let mask = Array2::from_elem((1, 1), 1.0);
        let l = ssl_consistency_loss(&a, &b, Some(&mask));
        assert!((l.scalar_value() - 2.0).abs() < 1e-12);

        // Identical branches -> exactly 0, masked or not.
        let c = graph.var_from(&[2, 3, 3], (0..18).map(|i| i as f64).collect());
        let d = graph.var_from(&[2, 3, 3], (0..18).map(|i| i as f64).collect());
        let m = Array2::from_elem((3, 3), 0.7);
        assert_eq!(ssl_consistency_loss(&c, &d, Some(&m)).scalar_value(), 0.0);
        assert_eq!(ssl_consistency_loss(&c, &d, None).scalar_value(), 0.0);

        // All-zero mask -> 0.
        let z = Array2::zeros((3, 3));
        let e = graph.var_from(&[2, 3, 3], (0..18).map(|i| (i * i) as f64 * 0.1).collect());
        assert_eq!(ssl_consistency_loss(&c, &e, Some(&z)).scalar_value(), 0.0);
    }

    #[test]
    fn ssl_mask_scale_invariance_and_support() {
        let graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = graph.var_from(&[2, 4, 4], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = graph.var_from(&[2, 4, 4], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let m = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let base = ssl_consistency_loss(&a, &b, Some(&m)).scalar_value();
        for c in [0.25, 3.0, 171.0] {
            let scaled = ssl_consistency_loss(&a, &b, Some(&(m.clone() * c))).scalar_value();
            assert!((scaled - base).abs() < 1e-6, "mask scaling changed the loss");
        }
        // Mask zero except one cell: loss depends only on that cell.
        let mut m1 = Array2::zeros((4, 4));
        m1[[2, 1]] = 1.0;
        let l1 = ssl_consistency_loss(&a, &b, Some(&m1)).scalar_value();
        // Perturb the strong branch outside that cell: loss unchanged.
        let mut bv = b.value();
        bv[[0, 0, 0]] += 100.0;
        bv[[1, 3, 3]] -= 50.0;
        let b2 = graph.var(bv);
        let l2 = ssl_consistency_loss(&a, &b2, Some(&m1)).scalar_value();
        assert_eq!(l1, l2);
    }

    #[test]
    fn ssl_gradient_reaches_only_strong_branch() {
        let graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = graph.var_from(&[2, 3, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let s = graph.var_from(&[2, 3, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let m = Array2::from_elem((3, 3), 0.5);
        let loss = ssl_consistency_loss(&w, &s, Some(&m));
        let grads = loss.backward();
        assert!(!grads.reached(&w), "no gradient may reach the weak branch");
        let gs = grads.wrt(&s);
        assert!(gs.iter().any(|v| *v != 0.0), "strong branch must receive gradient");
        // Every masked cell with a nonzero difference contributes gradient.
        let diff = &w.value() - &s.value();
        for i in 0..3 {
            for j in 0..3 {
                let d2: f64 = (0..2).map(|c| diff[[c, i, j]].powi(2)).sum();
                if d2 > 1e-9 {
                    let g2: f64 = (0..2).map(|c| gs[[c, i, j]].powi(2)).sum();
                    assert!(g2 > 0.0, "masked cell ({i},{j}) missing gradient");
                }
            }
        }
    }

    #[test]
    fn decode_peaks_contract() {
        let spec = BevSpec::new(-8.0, 8.0, -8.0, 8.0, 2.0).unwrap();
        let (h, w) = (spec.rows(), spec.cols());
        // All-zero heatmap: nothing detected.
        let probs = Array3::zeros((2, h, w));
        let reg = Array3::zeros((8, h, w));
        assert!(decode_peaks(&probs, &reg, &spec, 0.1, 10).is_empty());

        // Single peak with zero offsets decodes to the cell's metric center.
        let mut probs = Array3::zeros((2, h, w));
        probs[[1, 3, 5]] = 0.8;
        let dets = decode_peaks(&probs, &reg, &spec, 0.1, 10);
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        let (cx, cy) = spec.cell_center(3, 5);
        assert_eq!(d.boxed.center[0], cx);
        assert_eq!(d.boxed.center[1], cy);
        assert_eq!(d.boxed.category, 1);
        assert!((d.boxed.dims[0] - 1.0).abs() < 1e-12, "exp(0) dims");

        // Two adjacent candidates: only the higher survives.
        let mut probs = Array3::zeros((2, h, w));
        probs[[0, 4, 4]] = 0.9;
        probs[[0, 4, 5]] = 0.7;
        let dets = decode_peaks(&probs, &reg, &spec, 0.1, 10);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].boxed.score, 0.9);
    }

    #[test]
    fn extract_features_deterministic_and_shift_equivariant() {
        let model = StudentModel::new(tiny_cfg(), 5).unwrap();
        let pts = vec![[0.3, 0.4, 0.5], [-3.2, 2.1, 0.1], [4.4, -5.3, 1.0]];
        assert_eq!(model.extract_bev_features(&pts), model.extract_bev_features(&pts));

        // With an identity trunk (center-tap kernel, zero bias), translating
        // the cloud by one cell shifts the feature map one column.
        let mut model = model;
        let c = model.cfg.channels;
        let eye_kernel = ArrayD::from_shape_fn(IxDyn(&[c, c, 3, 3]), |ix| {
            if ix[0] == ix[1] && ix[2] == 1 && ix[3] == 1 {
                1.0
            } else {
                0.0
            }
        });
        model.store.insert("bev_enc.conv0.w", eye_kernel);
        model.store.insert("bev_enc.conv0.b", zeros(&[c]));
        let res = model.cfg.bev_spec.resolution;
        let shifted: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + res, p[1], p[2]]).collect();
        let a = model.extract_bev_features(&pts);
        let b = model.extract_bev_features(&shifted);
        let (_, hh, ww) = a.dim();
        for ci in 0..c {
            for i in 0..hh {
                for j in 0..ww - 1 {
                    assert!((a[[ci, i, j]] - b[[ci, i, j + 1]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_cloud_features_are_trunk_bias_only() {
        let model = StudentModel::new(tiny_cfg(), 6).unwrap();
        let f = model.extract_bev_features(&[]);
        // Every cell identical: the only signal is the conv bias.
        let (c, h, w) = f.dim();
        for ci in 0..c {
            let v = f[[ci, 0, 0]];
            for i in 0..h {
                for j in 0..w {
                    assert_eq!(f[[ci, i, j]], v);
                }
            }
        }
    }

    #[test]
    fn train_step_lambda_zero_reduces_to_supervised() {
        let mut cfg = tiny_cfg();
        cfg.ssl_weight = 0.0;
        let mut model = StudentModel::new(cfg, 7).unwrap();
        let mut opt = Adam::new(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = tiny_scene(1);
        let ps = pseudo_from(&tiny_scene(2));
        let b = student_train_step(&mut model, &mut opt, &[&s], &[&ps], &mut rng).unwrap();
        assert_eq!(b.ssl, 0.0);
        assert!((b.total - (b.det_heat + b.det_reg)).abs() < 1e-9);
    }

    #[test]
    fn train_step_empty_pseudo_batch_has_zero_ssl() {
        let mut model = StudentModel::new(tiny_cfg(), 8).unwrap();
        let mut opt = Adam::new(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = tiny_scene(1);
        let b = student_train_step(&mut model, &mut opt, &[&s], &[], &mut rng).unwrap();
        assert_eq!(b.ssl, 0.0);
        assert!(b.total.is_finite());
    }

    #[test]
    fn train_step_deterministic_under_seed() {
        let run = || {
            let mut model = StudentModel::new(tiny_cfg(), 9).unwrap();
            let mut opt = Adam::new(1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let s = tiny_scene(1);
            let ps = pseudo_from(&tiny_scene(2));
            let mut vals = Vec::new();
            for _ in 0..3 {
                let b = student_train_step(&mut model, &mut opt, &[&s], &[&ps], &mut rng).unwrap();
                vals.push(b.total);
            }
            vals
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ssl_fixpoint_identity_inputs_and_augs() {
        // Identical branches with identity augmentations: the consistency
        // term is exactly zero by the guarded norm.
        let model = StudentModel::new(tiny_cfg(), 10).unwrap();
        let s = tiny_scene(3);
        let graph = Graph::new();
        let binding = ParamBinding::new(&graph);
        let fwd = Fwd { graph: &graph, binding: &binding, store: &model.store };
        let f1 = model.features(&fwd, &s.points);
        let f2 = model.features(&fwd, &s.points);
        let mask = gaussian_bev_mask(&s.annotations, &model.cfg.bev_spec, 2.0).unwrap();
        let l = ssl_consistency_loss(&f1, &f2, Some(&mask));
        assert_eq!(l.scalar_value(), 0.0);
    }

    #[test]
    fn short_training_reduces_detection_loss() {
        let mut model = StudentModel::new(tiny_cfg(), 11).unwrap();
        let scenes: Vec<Scene> = (0..4).map(tiny_scene).collect();
        let mut opt = Adam::new(3e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut first = None;
        let mut last = 0.0;
        for step in 0..60 {
            let s = &scenes[step % scenes.len()];
            let b = student_train_step(&mut model, &mut opt, &[s], &[], &mut rng).unwrap();
            if first.is_none() {
                first = Some(b.total);
            }
            last = b.total;
        }
        assert!(last < first.unwrap(), "loss should drop: {first:?} -> {last}");
    }
}
