//! Feature encoders shared by the teacher and student (same design, never
//! shared weights): a pillar-style point scatter encoder producing BEV
//! feature pyramids, and a convolutional encoder over the per-view rasters.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::geometry::{bev_project, BevSpec};
use crate::nn::{xavier, zeros, ParamBinding, ParamStore};
use crate::types::ImageRaster;

/// Forward-pass context: the tape plus the parameter store/binding.
pub struct Fwd<'a> {
    pub graph: &'a Rc<Graph>,
    pub binding: &'a ParamBinding,
    pub store: &'a ParamStore,
}

impl Fwd<'_> {
    pub fn p(&self, name: &str) -> Var {
        self.binding.var(self.store, name)
    }
}

/// Pillar-style BEV encoder: per-point MLP on cell-relative coordinates,
/// scatter-mean into the grid, then a small convolutional trunk emitting a
/// two-level pyramid (full and half resolution).
#[derive(Debug, Clone)]
pub struct BevEncoder {
    pub prefix: String,
    pub channels: usize,
}

impl BevEncoder {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BevEncoder { prefix: prefix.to_string(), channels }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.channels;
        let p = &self.prefix;
        store.get_or_init(&format!("{p}.point.w"), &[c, 3], |d| xavier(&[c, 3], d), rng);
        store.get_or_init(&format!("{p}.point.b"), &[c], |_| zeros(&[c]), rng);
        store.get_or_init(&format!("{p}.conv0.w"), &[c, c, 3, 3], |d| xavier(&[c, c, 3, 3], d), rng);
        store.get_or_init(&format!("{p}.conv0.b"), &[c], |_| zeros(&[c]), rng);
        store.get_or_init(&format!("{p}.conv1.w"), &[c, c, 3, 3], |d| xavier(&[c, c, 3, 3], d), rng);
        store.get_or_init(&format!("{p}.conv1.b"), &[c], |_| zeros(&[c]), rng);
    }

    /// Scatter stage only: per-point embeddings mean-pooled into cells.
    /// Out-of-range points are dropped. An empty cloud yields a zero map.
    pub fn scatter(&self, fwd: &Fwd<'_>, points: &[[f64; 3]], spec: &BevSpec) -> Var {
        let (h, w) = (spec.rows(), spec.cols());
        let mut feats: Vec<f64> = Vec::with_capacity(points.len() * 3);
        let mut cells: Vec<Option<(usize, usize)>> = Vec::with_capacity(points.len());
        let mut kept = 0usize;
        for p in points {
            let proj = bev_project(*p, spec);
            if !proj.in_range {
                continue;
            }
            let (row, col) = (proj.row.floor() as usize, proj.col.floor() as usize);
            let (cx, cy) = spec.cell_center(row, col);
            feats.extend_from_slice(&[p[0] - cx, p[1] - cy, p[2]]);
            cells.push(Some((row, col)));
            kept += 1;
        }
        let pf = fwd.graph.var(ArrayD::from_shape_vec(IxDyn(&[kept, 3]), feats).unwrap());
        let p = &self.prefix;
        let emb = crate::nn::linear(&pf, &fwd.p(&format!("{p}.point.w")), &fwd.p(&format!("{p}.point.b")))
            .relu();
        emb.scatter_mean(&cells, h, w)
    }

    /// Full pyramid: `levels` feature maps, level l at 1/2^l resolution.
    pub fn forward(&self, fwd: &Fwd<'_>, points: &[[f64; 3]], spec: &BevSpec, levels: usize) -> Vec<Var> {
        let grid = self.scatter(fwd, points, spec);
        let p = &self.prefix;
        let l0 = grid
            .conv2d(&fwd.p(&format!("{p}.conv0.w")), &fwd.p(&format!("{p}.conv0.b")), 1, 1)
            .relu();
        let mut pyramid = vec![l0];
        for _ in 1..levels {
            let prev = pyramid.last().unwrap();
            let next = prev
                .conv2d(&fwd.p(&format!("{p}.conv1.w")), &fwd.p(&format!("{p}.conv1.b")), 2, 1)
                .relu();
            pyramid.push(next);
        }
        pyramid
    }
}

/// Convolutional encoder over a category-coded raster, emitting a pyramid in
/// the same layout as [`BevEncoder::forward`].
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub prefix: String,
    pub in_channels: usize,
    pub channels: usize,
}

impl ImageEncoder {
    pub fn new(prefix: &str, in_channels: usize, channels: usize) -> Self {
        ImageEncoder { prefix: prefix.to_string(), in_channels, channels }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (ci, c) = (self.in_channels, self.channels);
        let p = &self.prefix;
        store.get_or_init(&format!("{p}.conv0.w"), &[c, ci, 3, 3], |d| xavier(&[c, ci, 3, 3], d), rng);
        store.get_or_init(&format!("{p}.conv0.b"), &[c], |_| zeros(&[c]), rng);
        store.get_or_init(&format!("{p}.conv1.w"), &[c, c, 3, 3], |d| xavier(&[c, c, 3, 3], d), rng);
        store.get_or_init(&format!("{p}.conv1.b"), &[c], |_| zeros(&[c]), rng);
    }

    pub fn forward(&self, fwd: &Fwd<'_>, raster: &ImageRaster, levels: usize) -> Vec<Var> {
        let data: Vec<f64> = raster.data.iter().map(|v| *v as f64).collect();
        let input = fwd.graph.var(
            ArrayD::from_shape_vec(IxDyn(&[raster.channels, raster.height, raster.width]), data)
                .unwrap(),
        );
        let p = &self.prefix;
        let l0 = input
            .conv2d(&fwd.p(&format!("{p}.conv0.w")), &fwd.p(&format!("{p}.conv0.b")), 1, 1)
            .relu();
        let mut pyramid = vec![l0];
        for _ in 1..levels {
            let prev = pyramid.last().unwrap();
            let next = prev
                .conv2d(&fwd.p(&format!("{p}.conv1.w")), &fwd.p(&format!("{p}.conv1.b")), 2, 1)
                .relu();
            pyramid.push(next);
        }
        pyramid
    }
}
