//! The point-to-box teacher: object queries anchored on weak point
//! annotations, a decoder layer built on deformable RoI cross-attention over
//! image and BEV feature pyramids, instance-level cross-modal fusion, box and
//! category heads with identity assignment, and pseudo-label emission.



use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{BevEncoder, Fwd, ImageEncoder};
use crate::error::{Error, Result};
use crate::geometry::{bev_project, make_roi_grid, select_view, BevSpec, RoiGrid};
use crate::io::{JsonlLogger, PseudoLabelRecord, ScoredBoxRecord};
use crate::metrics::MetricsReport;
use crate::nn::{linear, xavier, zeros, Adam, ParamBinding, ParamStore};
use crate::scene::resample_annotations;
use crate::types::{wrap_angle, Box3D, CameraCalib, Detection, ImageRaster, PointAnnotation, Scene};

/// Deformable RoI cross-attention shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroiConfig {
    /// Attention heads M; must divide `embed_dim`.
    pub heads: usize,
    /// Pyramid levels L.
    pub levels: usize,
    /// RoI grid side K (K^2 reference points).
    pub grid_k: usize,
    pub embed_dim: usize,
}

impl DroiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config("embed_dim must be divisible by heads"));
        }
        if self.grid_k < 1 || self.levels < 1 {
            return Err(Error::config("grid_k and levels must be >= 1"));
        }
        Ok(())
    }
}

/// Parameter handles for one deformable RoI cross-attention block.
pub struct DroiParams {
    pub w_off: Var,
    pub b_off: Var,
    pub w_attn: Var,
    pub b_attn: Var,
    pub w_val: Var,
    pub w_out: Var,
}

pub fn init_droi_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &DroiConfig) {
    let d = cfg.embed_dim;
    let n_off = cfg.heads * cfg.levels * cfg.grid_k * cfg.grid_k * 2;
    let n_attn = cfg.heads * cfg.grid_k * cfg.grid_k * cfg.levels;
    // Offsets start at zero so sampling begins exactly on the RoI grid.
    store.get_or_init(&format!("{prefix}.off.w"), &[n_off, d], |_| zeros(&[n_off, d]), rng);
    store.get_or_init(&format!("{prefix}.off.b"), &[n_off], |_| zeros(&[n_off]), rng);
    store.get_or_init(&format!("{prefix}.attn.w"), &[n_attn, d], |dr| xavier(&[n_attn, d], dr), rng);
    store.get_or_init(&format!("{prefix}.attn.b"), &[n_attn], |_| zeros(&[n_attn]), rng);
    store.get_or_init(&format!("{prefix}.val.w"), &[d, d], |dr| xavier(&[d, d], dr), rng);
    store.get_or_init(&format!("{prefix}.out.w"), &[d, d], |dr| xavier(&[d, d], dr), rng);
}

pub fn droi_params(fwd: &Fwd<'_>, prefix: &str) -> DroiParams {
    DroiParams {
        w_off: fwd.p(&format!("{prefix}.off.w")),
        b_off: fwd.p(&format!("{prefix}.off.b")),
        w_attn: fwd.p(&format!("{prefix}.attn.w")),
        b_attn: fwd.p(&format!("{prefix}.attn.b")),
        w_val: fwd.p(&format!("{prefix}.val.w")),
        w_out: fwd.p(&format!("{prefix}.out.w")),
    }
}

/// Downsampling factor of each pyramid level produced by the encoders.
pub fn pyramid_scales(levels: usize) -> Vec<f64> {
    (0..levels).map(|l| (1usize << l) as f64).collect()
}

/// Deformable RoI cross-attention for a single query.
///
/// For each of the K^2 grid points, each head samples one location per level
/// at `grid/scale - 0.5 + offset` (texel-center convention) with bilinear
/// interpolation and zero padding, mixes levels with softmax weights, and the
/// per-point results are summed over the grid and projected back to D.
/// Offsets and weights are linear in the query content; everything is
/// differentiable in the features, the query, and the parameters.
pub fn droi_cross_attention(
    query: &Var,
    levels: &[Var],
    level_scales: &[f64],
    grid: &RoiGrid,
    cfg: &DroiConfig,
    params: &DroiParams,
) -> Var {
    cfg.validate().expect("invalid DRoI config");
    assert_eq!(levels.len(), cfg.levels, "pyramid level count mismatch");
    assert_eq!(level_scales.len(), cfg.levels);
    let k2 = cfg.grid_k * cfg.grid_k;
    assert_eq!(grid.points.nrows(), k2, "grid point count mismatch");
    let d = cfg.embed_dim;
    let dh = d / cfg.heads;
    let graph = levels[0].graph();

    let q_row = query.reshape(&[1, d]);
    let offs = linear(&q_row, &params.w_off, &params.b_off)
        .reshape(&[cfg.heads, cfg.levels, k2, 2]);
    let weights = linear(&q_row, &params.w_attn, &params.b_attn)
        .reshape(&[cfg.heads, k2, cfg.levels])
        .softmax_last();

    let mut head_outs: Vec<Var> = Vec::with_capacity(cfg.heads);
    for m in 0..cfg.heads {
        let mut head_sum: Option<Var> = None;
        for (l, level) in levels.iter().enumerate() {
            let scale = level_scales[l];
            let mut base = Vec::with_capacity(k2 * 2);
            for kk in 0..k2 {
                base.push(grid.points[[kk, 0]] / scale - 0.5);
                base.push(grid.points[[kk, 1]] / scale - 0.5);
            }
            let base = graph.var(ArrayD::from_shape_vec(IxDyn(&[k2, 2]), base).unwrap());
            let off_ml = offs.narrow(0, m, 1).narrow(1, l, 1).reshape(&[k2, 2]);
            let locs = base.add(&off_ml);
            let samples = level.bilinear_sample(&locs); // [k2, d]
            let vals = samples.matmul(&params.w_val.t()); // [k2, d]
            let v_h = vals.narrow(1, m * dh, dh); // [k2, dh]
            let w_row = weights.narrow(0, m, 1).narrow(2, l, 1).reshape(&[1, k2]);
            let contrib = w_row.matmul(&v_h); // [1, dh]
            head_sum = Some(match head_sum {
                None => contrib,
                Some(acc) => acc.add(&contrib),
            });
        }
        head_outs.push(head_sum.unwrap());
    }
    let cat = graph.concat(1, &head_outs); // [1, d]
    cat.matmul(&params.w_out.t()).reshape(&[d])
}

/// Parameter handles for the instance-level cross-modal fusion block.
pub struct FusionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub ln_g: Var,
    pub ln_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

pub fn init_fusion_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    let hidden = 2 * d;
    store.get_or_init(&format!("{prefix}.wq"), &[d, d], |dr| xavier(&[d, d], dr), rng);
    store.get_or_init(&format!("{prefix}.wk"), &[d, d], |dr| xavier(&[d, d], dr), rng);
    store.get_or_init(&format!("{prefix}.wv"), &[d, d], |dr| xavier(&[d, d], dr), rng);
    store.get_or_init(&format!("{prefix}.ln.g"), &[d], |_| crate::nn::ones(&[d]), rng);
    store.get_or_init(&format!("{prefix}.ln.b"), &[d], |_| zeros(&[d]), rng);
    store.get_or_init(&format!("{prefix}.ffn.w1"), &[hidden, d], |dr| xavier(&[hidden, d], dr), rng);
    store.get_or_init(&format!("{prefix}.ffn.b1"), &[hidden], |_| zeros(&[hidden]), rng);
    store.get_or_init(&format!("{prefix}.ffn.w2"), &[d, hidden], |dr| xavier(&[d, hidden], dr), rng);
    store.get_or_init(&format!("{prefix}.ffn.b2"), &[d], |_| zeros(&[d]), rng);
}

pub fn fusion_params(fwd: &Fwd<'_>, prefix: &str) -> FusionParams {
    FusionParams {
        w_q: fwd.p(&format!("{prefix}.wq")),
        w_k: fwd.p(&format!("{prefix}.wk")),
        w_v: fwd.p(&format!("{prefix}.wv")),
        ln_g: fwd.p(&format!("{prefix}.ln.g")),
        ln_b: fwd.p(&format!("{prefix}.ln.b")),
        ffn_w1: fwd.p(&format!("{prefix}.ffn.w1")),
        ffn_b1: fwd.p(&format!("{prefix}.ffn.b1")),
        ffn_w2: fwd.p(&format!("{prefix}.ffn.w2")),
        ffn_b2: fwd.p(&format!("{prefix}.ffn.b2")),
    }
}

/// Instance-level cross-modal fusion: the LiDAR instance feature attends over
/// the two-element set {image feature, LiDAR feature} with single-head
/// attention, followed by a residual add and a two-layer feed-forward block.
pub fn fuse_instance_features(f_img: &Var, f_lidar: &Var, params: &FusionParams) -> Var {
    let d = f_lidar.shape()[0];
    let graph = f_lidar.graph();
    let kv = graph.concat(0, &[f_img.reshape(&[1, d]), f_lidar.reshape(&[1, d])]); // [2, d]
    let q = f_lidar.reshape(&[1, d]).matmul(&params.w_q.t());
    let k = kv.matmul(&params.w_k.t());
    let v = kv.matmul(&params.w_v.t());
    let logits = q.matmul(&k.t()).scale(1.0 / (d as f64).sqrt()); // [1, 2]
    let attn = logits.softmax_last();
    let mix = attn.matmul(&v); // [1, d]
    let h = f_lidar.reshape(&[1, d]).add(&mix);
    let normed = h.layer_norm(1e-5).mul_bcast_last(&params.ln_g).add_bcast_last(&params.ln_b);
    let t = linear(&normed, &params.ffn_w1, &params.ffn_b1).relu();
    let t = linear(&t, &params.ffn_w2, &params.ffn_b2);
    h.add(&t).reshape(&[d])
}

/// A decoder object query: content embedding, explicit 3D reference point,
/// and the category hint carried by the annotation.
#[derive(Debug, Clone)]
pub struct QueryState {
    pub content: Vec<f64>,
    pub reference: [f64; 3],
    pub category_hint: u32,
}

/// Query initialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    /// References bound to the annotation positions (the method under test).
    Explicit,
    /// Point-encoder baseline: position enters only through the content
    /// embedding; references come from a learnable, uniformly initialized pool.
    Implicit,
}

/// Sinusoidal embedding of a 3D position into `d` dims: axes cycle through
/// the vector, frequencies fall geometrically, sin/cos alternate per pair.
pub fn sinusoidal_embed(p: [f64; 3], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let axis = j % 3;
        let pair = j / 3;
        let freq = 1.5 / 4.0_f64.powi((pair / 2) as i32);
        let angle = p[axis] * freq;
        out.push(if pair % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub grid_k: usize,
    pub layers: usize,
    pub n_categories: usize,
    pub use_images: bool,
    /// Metric footprint of the image RoI grid at the object, meters.
    pub roi_footprint: f64,
    pub bev_spec: BevSpec,
    /// Reference-pool size for the implicit baseline.
    pub max_queries: usize,
    pub query_init: QueryInit,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            embed_dim: 16,
            heads: 2,
            levels: 2,
            grid_k: 4,
            layers: 1,
            n_categories: 3,
            use_images: true,
            roi_footprint: 2.0,
            bev_spec: BevSpec::new(-52.0, 52.0, -52.0, 52.0, 2.0).unwrap(),
            max_queries: 16,
            query_init: QueryInit::Explicit,
        }
    }
}

impl TeacherConfig {
    fn droi(&self) -> DroiConfig {
        DroiConfig {
            heads: self.heads,
            levels: self.levels,
            grid_k: self.grid_k,
            embed_dim: self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.droi().validate()?;
        if self.layers == 0 {
            return Err(Error::config("teacher needs at least one decoder layer"));
        }
        Ok(())
    }
}

/// The teacher model: configuration plus its parameter store.
pub struct TeacherModel {
    pub cfg: TeacherConfig,
    pub store: ParamStore,
}

/// Scene inputs the teacher consumes (weak scenes qualify: no boxes needed).
pub struct TeacherInputs<'a> {
    pub points: &'a [[f64; 3]],
    pub images: &'a [ImageRaster],
    pub calibs: &'a [CameraCalib],
}

impl<'a> TeacherInputs<'a> {
    pub fn from_scene(s: &'a Scene) -> Self {
        TeacherInputs { points: &s.points, images: &s.images, calibs: &s.calibs }
    }

    pub fn from_weak(s: &'a crate::types::WeakScene) -> Self {
        TeacherInputs { points: &s.points, images: &s.images, calibs: &s.calibs }
    }
}

/// One forward pass: raw head outputs (offset, log-dims, sin/cos yaw,
/// category logits per query) and the references used.
pub struct TeacherForward {
    pub head_out: Option<Var>,
    pub references: Vec<[f64; 3]>,
    /// Reference rows as a Var when they are learnable (implicit baseline).
    ref_var: Option<Var>,
}

impl TeacherModel {
    pub fn new(cfg: TeacherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        store.get_or_init("cat_embed", &[cfg.n_categories, d], |dr| xavier(&[cfg.n_categories, d], dr), &mut rng);
        if cfg.query_init == QueryInit::Implicit {
            store.get_or_init("pt_enc.w1", &[d, 2], |dr| xavier(&[d, 2], dr), &mut rng);
            store.get_or_init("pt_enc.b1", &[d], |_| zeros(&[d]), &mut rng);
            store.get_or_init("pt_enc.w2", &[d, d], |dr| xavier(&[d, d], dr), &mut rng);
            store.get_or_init("pt_enc.b2", &[d], |_| zeros(&[d]), &mut rng);
            let spec = cfg.bev_spec.clone();
            let mq = cfg.max_queries;
            store.get_or_init(
                "ref_pool",
                &[mq, 3],
                |dr| {
                    // Uniform over the BEV extent, rescaled from draw() in [-1,1).
                    ArrayD::from_shape_fn(IxDyn(&[mq, 3]), |ix| match ix[1] {
                        0 => (dr() + 1.0) / 2.0 * (spec.x_max - spec.x_min) + spec.x_min,
                        1 => (dr() + 1.0) / 2.0 * (spec.y_max - spec.y_min) + spec.y_min,
                        _ => (dr() + 1.0) / 2.0 * 2.0,
                    })
                },
                &mut rng,
            );
        }
        BevEncoder::new("bev_enc", d).init_params(&mut store, &mut rng);
        ImageEncoder::new("img_enc", cfg.n_categories, d).init_params(&mut store, &mut rng);
        for l in 0..cfg.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                store.get_or_init(&format!("dec{l}.sa.{w}"), &[d, d], |dr| xavier(&[d, d], dr), &mut rng);
            }
            store.get_or_init(&format!("dec{l}.ln1.g"), &[d], |_| crate::nn::ones(&[d]), &mut rng);
            store.get_or_init(&format!("dec{l}.ln1.b"), &[d], |_| zeros(&[d]), &mut rng);
            init_droi_params(&mut store, &mut rng, &format!("dec{l}.droi_img"), &cfg.droi());
            init_droi_params(&mut store, &mut rng, &format!("dec{l}.droi_bev"), &cfg.droi());
            init_fusion_params(&mut store, &mut rng, &format!("dec{l}.fuse"), d);
            store.get_or_init(&format!("dec{l}.ln3.g"), &[d], |_| crate::nn::ones(&[d]), &mut rng);
            store.get_or_init(&format!("dec{l}.ln3.b"), &[d], |_| zeros(&[d]), &mut rng);
        }
        store.get_or_init("head.w1", &[d, d], |dr| xavier(&[d, d], dr), &mut rng);
        store.get_or_init("head.b1", &[d], |_| zeros(&[d]), &mut rng);
        let out_dim = 8 + cfg.n_categories;
        // Zero-initialized final layer anchors predictions on the references.
        store.get_or_init("head.w2", &[out_dim, d], |_| zeros(&[out_dim, d]), &mut rng);
        store.get_or_init("head.b2", &[out_dim], |_| zeros(&[out_dim]), &mut rng);
        Ok(TeacherModel { cfg, store })
    }

    pub fn from_store(cfg: TeacherConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(TeacherModel { cfg, store })
    }

    /// Builds the per-query content matrix [n, D] plus references.
    fn build_queries(
        &self,
        fwd: &Fwd<'_>,
        annotations: &[PointAnnotation],
    ) -> (Var, Vec<[f64; 3]>, Option<Var>) {
        let d = self.cfg.embed_dim;
        let n = annotations.len();
        let graph = fwd.graph;
        let cat_embed = fwd.p("cat_embed");
        let cat_rows: Vec<Var> = annotations
            .iter()
            .map(|a| cat_embed.narrow(0, a.category as usize, 1))
            .collect();
        let cat_mat = graph.concat(0, &cat_rows); // [n, d]
        match self.cfg.query_init {
            QueryInit::Explicit => {
                let mut pos = Vec::with_capacity(n * d);
                for a in annotations {
                    pos.extend(sinusoidal_embed(a.position, d));
                }
                let pos = graph.var(ArrayD::from_shape_vec(IxDyn(&[n, d]), pos).unwrap());
                let content = cat_mat.add(&pos);
                let refs = annotations.iter().map(|a| a.position).collect();
                (content, refs, None)
            }
            QueryInit::Implicit => {
                assert!(
                    n <= self.cfg.max_queries,
                    "implicit baseline supports at most {} queries",
                    self.cfg.max_queries
                );
                let extent = self.cfg.bev_spec.x_max.abs().max(1.0);
                let mut coords = Vec::with_capacity(n * 2);
                for a in annotations {
                    coords.push(a.position[0] / extent);
                    coords.push(a.position[1] / extent);
                }
                let coords = graph.var(ArrayD::from_shape_vec(IxDyn(&[n, 2]), coords).unwrap());
                let h = linear(&coords, &fwd.p("pt_enc.w1"), &fwd.p("pt_enc.b1")).relu();
                let enc = linear(&h, &fwd.p("pt_enc.w2"), &fwd.p("pt_enc.b2"));
                let content = cat_mat.add(&enc);
                let pool = fwd.p("ref_pool");
                let ref_rows = pool.narrow(0, 0, n);
                let pv = ref_rows.value();
                let refs = (0..n).map(|i| [pv[[i, 0]], pv[[i, 1]], pv[[i, 2]]]).collect();
                (content, refs, Some(ref_rows))
            }
        }
    }

    /// Full forward pass over one scene's annotations.
    pub fn forward(
        &self,
        fwd: &Fwd<'_>,
        inputs: &TeacherInputs<'_>,
        annotations: &[PointAnnotation],
    ) -> TeacherForward {
        let n = annotations.len();
        if n == 0 {
            return TeacherForward { head_out: None, references: vec![], ref_var: None };
        }
        let cfg = &self.cfg;
        let d = cfg.embed_dim;
        let (mut x, references, ref_var) = self.build_queries(fwd, annotations);

        // Encoders run once; the pyramids are shared by all layers.
        let bev_enc = BevEncoder::new("bev_enc", d);
        let bev_pyr = bev_enc.forward(fwd, inputs.points, &cfg.bev_spec, cfg.levels);
        let scales = pyramid_scales(cfg.levels);

        // Per-query view selection and RoI grids (references are fixed anchors).
        let mut view_of_query: Vec<Option<(usize, RoiGrid)>> = Vec::with_capacity(n);
        let mut needed_views: Vec<usize> = Vec::new();
        for r in &references {
            let sel = if cfg.use_images { select_view(*r, inputs.calibs) } else { None };
            match sel {
                Some((vi, proj)) => {
                    let focal = inputs.calibs[vi].k[0][0];
                    let spacing =
                        (focal * cfg.roi_footprint / (proj.depth * cfg.grid_k as f64)).max(1e-6);
                    let grid = make_roi_grid([proj.u, proj.v], cfg.grid_k, spacing).unwrap();
                    if !needed_views.contains(&vi) {
                        needed_views.push(vi);
                    }
                    view_of_query.push(Some((vi, grid)));
                }
                None => view_of_query.push(None),
            }
        }
        let img_enc = ImageEncoder::new("img_enc", cfg.n_categories, d);
        let mut view_pyrs: Vec<Option<Vec<Var>>> = vec![None; inputs.images.len()];
        for &vi in &needed_views {
            view_pyrs[vi] = Some(img_enc.forward(fwd, &inputs.images[vi], cfg.levels));
        }

        let mut bev_grids: Vec<RoiGrid> = Vec::with_capacity(n);
        for r in &references {
            let proj = bev_project(*r, &cfg.bev_spec);
            bev_grids.push(make_roi_grid([proj.col, proj.row], cfg.grid_k, 1.0).unwrap());
        }

        let zero_feat = fwd.graph.var(ArrayD::zeros(IxDyn(&[d])));
        for l in 0..cfg.layers {
            // Self-attention across queries.
            let wq = fwd.p(&format!("dec{l}.sa.wq"));
            let wk = fwd.p(&format!("dec{l}.sa.wk"));
            let wv = fwd.p(&format!("dec{l}.sa.wv"));
            let wo = fwd.p(&format!("dec{l}.sa.wo"));
            let q = x.matmul(&wq.t());
            let k = x.matmul(&wk.t());
            let v = x.matmul(&wv.t());
            let attn = q.matmul(&k.t()).scale(1.0 / (d as f64).sqrt()).softmax_last();
            let sa = attn.matmul(&v).matmul(&wo.t());
            x = x
                .add(&sa)
                .layer_norm(1e-5)
                .mul_bcast_last(&fwd.p(&format!("dec{l}.ln1.g")))
                .add_bcast_last(&fwd.p(&format!("dec{l}.ln1.b")));

            let droi_img = droi_params(fwd, &format!("dec{l}.droi_img"));
            let droi_bev = droi_params(fwd, &format!("dec{l}.droi_bev"));
            let fuse = fusion_params(fwd, &format!("dec{l}.fuse"));
            let mut fused_rows: Vec<Var> = Vec::with_capacity(n);
            for i in 0..n {
                let qi = x.narrow(0, i, 1).reshape(&[d]);
                let f_lidar = droi_cross_attention(
                    &qi,
                    &bev_pyr,
                    &scales,
                    &bev_grids[i],
                    &cfg.droi(),
                    &droi_bev,
                );
                let f_img = match &view_of_query[i] {
                    Some((vi, grid)) => droi_cross_attention(
                        &qi,
                        view_pyrs[*vi].as_ref().unwrap(),
                        &scales,
                        grid,
                        &cfg.droi(),
                        &droi_img,
                    ),
                    None => zero_feat.clone(),
                };
                let fused = fuse_instance_features(&f_img, &f_lidar, &fuse);
                fused_rows.push(fused.reshape(&[1, d]));
            }
            let fused = fwd.graph.concat(0, &fused_rows);
            x = x
                .add(&fused)
                .layer_norm(1e-5)
                .mul_bcast_last(&fwd.p(&format!("dec{l}.ln3.g")))
                .add_bcast_last(&fwd.p(&format!("dec{l}.ln3.b")));
        }

        let h = linear(&x, &fwd.p("head.w1"), &fwd.p("head.b1")).relu();
        let out = linear(&h, &fwd.p("head.w2"), &fwd.p("head.b2"));
        TeacherForward { head_out: Some(out), references, ref_var }
    }
}

/// Straightforward one-to-one assignment: query i pairs with ground truth i.
/// A length mismatch indicates pipeline corruption and is a hard error.
pub fn one_to_one_assign(n_predictions: usize, n_ground_truth: usize) -> Result<Vec<(usize, usize)>> {
    if n_predictions != n_ground_truth {
        return Err(Error::shape(format!(
            "one-to-one assignment needs equal counts, got {n_predictions} predictions vs {n_ground_truth} ground truths"
        )));
    }
    Ok((0..n_predictions).map(|i| (i, i)).collect())
}

/// Loss weights and the per-term breakdown.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TeacherLossWeights {
    pub lambda_box: f64,
    pub lambda_cls: f64,
}

impl Default for TeacherLossWeights {
    fn default() -> Self {
        TeacherLossWeights { lambda_box: 1.0, lambda_cls: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TeacherLossBreakdown {
    pub total: f64,
    pub box_term: f64,
    pub cls_term: f64,
}

/// L1 on the decoded box parameters (center, dims, yaw as sin/cos) plus
/// focal loss on the category logits, averaged over queries, under the
/// identity pairing.
pub fn teacher_loss(
    forward: &TeacherForward,
    gts: &[Box3D],
    pairing: &[(usize, usize)],
    weights: &TeacherLossWeights,
    n_categories: usize,
) -> Result<(Var, TeacherLossBreakdown)> {
    let out = forward
        .head_out
        .as_ref()
        .ok_or_else(|| Error::shape("teacher_loss on an empty forward"))?;
    let n = forward.references.len();
    if pairing.len() != n || gts.len() != n {
        return Err(Error::shape("pairing/ground-truth length mismatch"));
    }
    for (qi, gi) in pairing {
        if qi != gi {
            return Err(Error::shape("teacher pairing must be the identity"));
        }
    }
    let graph = out.graph();

    let mut ref_rows = Vec::with_capacity(n * 3);
    let mut gt_centers = Vec::with_capacity(n * 3);
    let mut gt_dims = Vec::with_capacity(n * 3);
    let mut gt_sc = Vec::with_capacity(n * 2);
    for (i, gt) in gts.iter().enumerate() {
        ref_rows.extend(forward.references[i]);
        gt_centers.extend(gt.center);
        gt_dims.extend(gt.dims);
        gt_sc.push(gt.yaw.sin());
        gt_sc.push(gt.yaw.cos());
    }
    // References: learnable rows for the implicit baseline, constants otherwise.
    let refs = match &forward.ref_var {
        Some(v) => v.clone(),
        None => graph.var(ArrayD::from_shape_vec(IxDyn(&[n, 3]), ref_rows).unwrap()),
    };
    let gt_centers = graph.var(ArrayD::from_shape_vec(IxDyn(&[n, 3]), gt_centers).unwrap());
    let gt_dims = graph.var(ArrayD::from_shape_vec(IxDyn(&[n, 3]), gt_dims).unwrap());
    let gt_sc = graph.var(ArrayD::from_shape_vec(IxDyn(&[n, 2]), gt_sc).unwrap());

    let pred_center = out.narrow(1, 0, 3).add(&refs);
    let pred_dims = out.narrow(1, 3, 3).exp();
    let pred_sc = out.narrow(1, 6, 2);
    let diffs = graph.concat(
        1,
        &[
            pred_center.sub(&gt_centers),
            pred_dims.sub(&gt_dims),
            pred_sc.sub(&gt_sc),
        ],
    );
    let box_term = diffs.abs().sum_axis(1).mean_all();

    let logits = out.narrow(1, 8, n_categories);
    let probs = logits.softmax_last();
    let mut onehot = ArrayD::zeros(IxDyn(&[n, n_categories]));
    for (i, gt) in gts.iter().enumerate() {
        onehot[[i, gt.category as usize]] = 1.0;
    }
    let onehot = graph.var(onehot);
    let pt = probs.mul(&onehot).sum_axis(1); // [n]
    let focal = pt
        .neg()
        .add_scalar(1.0)
        .pow_const(2.0)
        .mul(&pt.ln_clamped(1e-12).neg())
        .mean_all();

    let total = box_term.scale(weights.lambda_box).add(&focal.scale(weights.lambda_cls));
    let breakdown = TeacherLossBreakdown {
        total: total.scalar_value(),
        box_term: box_term.scalar_value(),
        cls_term: focal.scalar_value(),
    };
    Ok((total, breakdown))
}

/// Decodes raw head outputs into scored boxes. Category is forced from the
/// annotation; the score is the softmax confidence of that category.
pub fn decode_boxes(
    head_values: &Array2<f64>,
    references: &[[f64; 3]],
    annotations: &[PointAnnotation],
    n_categories: usize,
) -> Vec<Box3D> {
    let n = references.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let center = [
            references[i][0] + head_values[[i, 0]],
            references[i][1] + head_values[[i, 1]],
            references[i][2] + head_values[[i, 2]],
        ];
        let dims = [
            head_values[[i, 3]].exp(),
            head_values[[i, 4]].exp(),
            head_values[[i, 5]].exp(),
        ];
        let yaw = wrap_angle(head_values[[i, 6]].atan2(head_values[[i, 7]]));
        let cat = annotations[i].category;
        let mut mx = f64::NEG_INFINITY;
        for c in 0..n_categories {
            mx = mx.max(head_values[[i, 8 + c]]);
        }
        let mut denom = 0.0;
        for c in 0..n_categories {
            denom += (head_values[[i, 8 + c]] - mx).exp();
        }
        let score = ((head_values[[i, 8 + cat as usize]] - mx).exp() / denom).clamp(0.0, 1.0);
        out.push(Box3D { center, dims, yaw, category: cat, score });
    }
    out
}

/// Queries for inspection: the operation-level view of query initialization.
pub fn init_queries(
    model: &TeacherModel,
    annotations: &[PointAnnotation],
) -> Vec<QueryState> {
    query_states(model, annotations, QueryInit::Explicit)
}

/// The implicit point-encoder baseline's query construction.
pub fn implicit_point_encoder_baseline(
    model: &TeacherModel,
    annotations: &[PointAnnotation],
) -> Vec<QueryState> {
    query_states(model, annotations, QueryInit::Implicit)
}

fn query_states(
    model: &TeacherModel,
    annotations: &[PointAnnotation],
    mode: QueryInit,
) -> Vec<QueryState> {
    assert_eq!(
        model.cfg.query_init, mode,
        "model was built for a different query-init mode"
    );
    if annotations.is_empty() {
        return vec![];
    }
    let graph = Graph::new();
    let binding = ParamBinding::new(&graph);
    let fwd = Fwd { graph: &graph, binding: &binding, store: &model.store };
    let (content, refs, _) = model.build_queries(&fwd, annotations);
    let cv = content.value();
    annotations
        .iter()
        .enumerate()
        .map(|(i, a)| QueryState {
            content: (0..model.cfg.embed_dim).map(|j| cv[[i, j]]).collect(),
            reference: refs[i],
            category_hint: a.category,
        })
        .collect()
}

/// Runs the teacher on one scene's annotations and decodes scored boxes.
pub fn predict_boxes(
    model: &TeacherModel,
    inputs: &TeacherInputs<'_>,
    annotations: &[PointAnnotation],
) -> Vec<Box3D> {
    if annotations.is_empty() {
        return vec![];
    }
    let graph = Graph::new();
    let binding = ParamBinding::new(&graph);
    let fwd = Fwd { graph: &graph, binding: &binding, store: &model.store };
    let f = model.forward(&fwd, inputs, annotations);
    let values = f
        .head_out
        .as_ref()
        .unwrap()
        .value()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    decode_boxes(&values, &f.references, annotations, model.cfg.n_categories)
}

/// Pseudo labels for a set of weak scenes: exactly one box per annotation,
/// category forced, no score filtering.
pub fn generate_pseudo_labels(
    model: &TeacherModel,
    weak_scenes: &[crate::types::WeakScene],
) -> Vec<PseudoLabelRecord> {
    use rayon::prelude::*;
    weak_scenes
        .par_iter()
        .map(|ws| {
            let boxes = predict_boxes(model, &TeacherInputs::from_weak(ws), &ws.annotations);
            PseudoLabelRecord {
                scene_id: ws.id,
                boxes: boxes.iter().map(ScoredBoxRecord::from_box).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weights: TeacherLossWeights,
    /// Redraw annotations from the ground-truth boxes on every visit.
    pub resample_annotations: bool,
    pub annotation_sigma_frac: f64,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            steps: 400,
            lr: 2e-3,
            weights: TeacherLossWeights::default(),
            resample_annotations: true,
            annotation_sigma_frac: 1.0 / 6.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
struct TeacherLogRecord {
    step: usize,
    total: f64,
    box_term: f64,
    cls_term: f64,
    lr: f64,
}

/// Trains the teacher on fully labeled scenes only.
pub fn train_teacher(
    model: &mut TeacherModel,
    scenes: &[Scene],
    tc: &TeacherTrainConfig,
    mut log: Option<&mut JsonlLogger>,
) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::config("teacher training requires a non-empty labeled split"));
    }
    if tc.steps == 0 {
        return Err(Error::config("teacher step count must be positive"));
    }
    let mut opt = Adam::new(tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    for step in 0..tc.steps {
        let scene = &scenes[step % scenes.len()];
        let annotations = if tc.resample_annotations {
            resample_annotations(scene, tc.annotation_sigma_frac, &mut rng)
        } else {
            scene.annotations.clone()
        };
        if annotations.is_empty() {
            continue;
        }
        let graph = Graph::new();
        let binding = ParamBinding::new(&graph);
        let fwd = Fwd { graph: &graph, binding: &binding, store: &model.store };
        let forward = model.forward(&fwd, &TeacherInputs::from_scene(scene), &annotations);
        let pairing = one_to_one_assign(annotations.len(), scene.boxes.len())?;
        let (total, breakdown) =
            teacher_loss(&forward, &scene.boxes, &pairing, &tc.weights, model.cfg.n_categories)?;
        let grads = total.backward();
        opt.apply(&mut model.store, &binding.gradients(&grads));
        if let Some(logger) = log.as_deref_mut() {
            logger.log(&TeacherLogRecord {
                step,
                total: breakdown.total,
                box_term: breakdown.box_term,
                cls_term: breakdown.cls_term,
                lr: tc.lr,
            })?;
        }
    }
    Ok(())
}

/// Evaluates teacher predictions against ground truth on labeled scenes,
/// using each scene's stored annotations.
pub fn evaluate_teacher(model: &TeacherModel, scenes: &[Scene]) -> Result<MetricsReport> {
    let per_scene: Vec<(Vec<Detection>, Vec<Box3D>)> = {
        use rayon::prelude::*;
        scenes
            .par_iter()
            .map(|s| {
                let boxes = predict_boxes(model, &TeacherInputs::from_scene(s), &s.annotations);
                (boxes.into_iter().map(Detection::new).collect(), s.boxes.clone())
            })
            .collect()
    };
    let views: Vec<(&[Detection], &[Box3D])> =
        per_scene.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
    crate::metrics::evaluate(&views)
}
