//! Tape-based reverse-mode automatic differentiation over dynamic-dimension
//! f64 arrays. A [`Graph`] owns a flat tape of nodes; a [`Var`] is an index
//! into it. Backward walks the tape in reverse and accumulates gradients.
//!
//! The op set is the minimum the models here need: elementwise arithmetic,
//! matmul, slicing/reshaping, reductions, a few activations, bilinear map
//! sampling, cell scatter-mean, and a naive conv2d.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

/// Gradient callback: receives (output gradient, own value, parent values)
/// and returns one gradient contribution per parent, in parent order.
type BackFn = Box<dyn Fn(&ArrayD<f64>, &ArrayD<f64>, &[&ArrayD<f64>]) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// A computation tape. Create one per training/evaluation step.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    #[allow(clippy::new_ret_no_self)]
    pub fn new() -> Rc<Graph> {
        Rc::new(Graph { nodes: RefCell::new(Vec::new()) })
    }

    fn push(self: &Rc<Self>, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, backward });
        Var { id, graph: Rc::clone(self) }
    }

    /// A differentiable leaf.
    pub fn var(self: &Rc<Self>, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None)
    }

    /// Leaf from a flat vector with an explicit shape.
    pub fn var_from(self: &Rc<Self>, shape: &[usize], data: Vec<f64>) -> Var {
        self.var(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch"))
    }

    /// Scalar leaf of shape `[1]`.
    pub fn scalar(self: &Rc<Self>, v: f64) -> Var {
        self.var_from(&[1], vec![v])
    }

    /// Concatenates along `axis`.
    pub fn concat(self: &Rc<Self>, axis: usize, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let values: Vec<ArrayD<f64>> = vars.iter().map(|v| v.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let parents: Vec<usize> = vars.iter().map(|v| v.id).collect();
        self.push(
            out,
            parents,
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &s in &sizes {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + s as isize), 1))
                        .to_owned();
                    out.push(piece);
                    start += s as isize;
                }
                out
            })),
        )
    }
}

/// Accumulated gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v` (zeros if the loss does not depend on it).
    pub fn wrt(&self, v: &Var) -> ArrayD<f64> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.value().raw_dim()),
        }
    }

    /// True if any gradient reached `v`.
    pub fn reached(&self, v: &Var) -> bool {
        self.grads[v.id].is_some()
    }
}

/// A handle to one tape node.
#[derive(Clone)]
pub struct Var {
    id: usize,
    graph: Rc<Graph>,
}

impl Var {
    /// The tape this var lives on.
    pub fn graph(&self) -> Rc<Graph> {
        Rc::clone(&self.graph)
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    fn value_ref(&self) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    /// Extracts the single element of a size-1 var.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value_ref();
        assert_eq!(v.len(), 1, "scalar_value on non-scalar var");
        *v.iter().next().unwrap()
    }

    fn same_graph(&self, other: &Var) {
        debug_assert!(Rc::ptr_eq(&self.graph, &other.graph), "vars from different graphs");
    }

    fn unary(&self, value: ArrayD<f64>, backward: BackFn) -> Var {
        self.graph.push(value, vec![self.id], Some(backward))
    }

    fn binary(&self, other: &Var, value: ArrayD<f64>, backward: BackFn) -> Var {
        self.same_graph(other);
        self.graph.push(value, vec![self.id, other.id], Some(backward))
    }

    /// A new leaf with this var's value: gradients stop here.
    pub fn detach(&self) -> Var {
        self.graph.var(self.value())
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = &*self.value_ref() + &*other.value_ref();
        self.binary(other, v, Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = &*self.value_ref() - &*other.value_ref();
        self.binary(other, v, Box::new(|g, _, _| vec![g.clone(), -g]))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = &*self.value_ref() * &*other.value_ref();
        self.binary(
            other,
            v,
            Box::new(|g, _, p| vec![g * p[1], g * p[0]]),
        )
    }

    pub fn neg(&self) -> Var {
        let v = (-&*self.value_ref()).to_owned();
        self.unary(v, Box::new(|g, _, _| vec![-g]))
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = &*self.value_ref() * c;
        self.unary(v, Box::new(move |g, _, _| vec![g * c]))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = &*self.value_ref() + c;
        self.unary(v, Box::new(|g, _, _| vec![g.clone()]))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var) -> Var {
        self.same_graph(other);
        let a = self.value_ref().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = other.value_ref().clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = a.dot(&b).into_dyn();
        self.binary(
            other,
            v,
            Box::new(|g, _, p| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a = p[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b = p[1].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![g2.dot(&b.t()).into_dyn(), a.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var {
        let v = self
            .value_ref()
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .t()
            .to_owned()
            .into_dyn();
        self.unary(
            v,
            Box::new(|g, _, _| {
                vec![g.view().into_dimensionality::<ndarray::Ix2>().unwrap().t().to_owned().into_dyn()]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let orig: Vec<usize> = self.shape();
        let v = self
            .value_ref()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.unary(
            v,
            Box::new(move |g, _, _| {
                vec![g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .unwrap()]
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value_ref()
            .slice_axis(Axis(axis), Slice::new(start as isize, Some((start + len) as isize), 1))
            .to_owned();
        self.unary(
            v,
            Box::new(move |g, _, p| {
                let mut out = ArrayD::zeros(p[0].raw_dim());
                out.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(g);
                vec![out]
            }),
        )
    }

    pub fn sum_all(&self) -> Var {
        let s = self.value_ref().sum();
        self.unary(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Box::new(|g, _, p| vec![ArrayD::from_elem(p[0].raw_dim(), g[[0]])]),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value_ref().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let v = self.value_ref().sum_axis(Axis(axis));
        let n = self.shape()[axis];
        self.unary(
            v,
            Box::new(move |g, _, p| {
                let mut out = ArrayD::zeros(p[0].raw_dim());
                for mut lane in out.axis_iter_mut(Axis(axis)) {
                    lane.assign(g);
                }
                let _ = n;
                vec![out]
            }),
        )
    }

    pub fn relu(&self) -> Var {
        let v = self.value_ref().mapv(|x| x.max(0.0));
        self.unary(
            v,
            Box::new(|g, _, p| {
                let mask = p[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![g * &mask]
            }),
        )
    }

    pub fn exp(&self) -> Var {
        let v = self.value_ref().mapv(f64::exp);
        self.unary(v, Box::new(|g, y, _| vec![g * y]))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value_ref().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Box::new(|g, y, _| vec![g * &(y * &y.mapv(|t| 1.0 - t))]))
    }

    /// `ln(max(x, floor))`; zero gradient inside the clamped region.
    pub fn ln_clamped(&self, floor: f64) -> Var {
        let v = self.value_ref().mapv(|x| x.max(floor).ln());
        self.unary(
            v,
            Box::new(move |g, _, p| {
                let dx = p[0].mapv(|x| if x > floor { 1.0 / x } else { 0.0 });
                vec![g * &dx]
            }),
        )
    }

    /// Elementwise square root mapping non-positive inputs to exactly 0;
    /// the gradient denominator is floored to keep it finite near 0.
    pub fn sqrt_guarded(&self) -> Var {
        let v = self.value_ref().mapv(|x| if x > 0.0 { x.sqrt() } else { 0.0 });
        self.unary(
            v,
            Box::new(|g, y, p| {
                let mut dx = y.clone();
                ndarray::Zip::from(&mut dx).and(p[0]).for_each(|d, &x| {
                    *d = if x > 0.0 { 0.5 / d.max(1e-8) } else { 0.0 };
                });
                vec![g * &dx]
            }),
        )
    }

    pub fn abs(&self) -> Var {
        let v = self.value_ref().mapv(f64::abs);
        self.unary(
            v,
            Box::new(|g, _, p| {
                let s = p[0].mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![g * &s]
            }),
        )
    }

    /// Elementwise power with a constant exponent (inputs assumed positive
    /// where the exponent is fractional).
    pub fn pow_const(&self, p: f64) -> Var {
        let v = self.value_ref().mapv(|x| x.powf(p));
        self.unary(
            v,
            Box::new(move |g, _, pa| {
                let dx = pa[0].mapv(|x| p * x.powf(p - 1.0));
                vec![g * &dx]
            }),
        )
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(&self) -> Var {
        let x = self.value_ref().clone();
        let last = x.ndim() - 1;
        let mut y = x.clone();
        for mut lane in y.lanes_mut(Axis(last)).into_iter() {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - m).exp());
            let s: f64 = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        self.unary(
            y,
            Box::new(move |g, y, _| {
                let mut dx = g * y;
                let last = y.ndim() - 1;
                // dx = y * (g - sum(g*y))
                let dots = dx.sum_axis(Axis(last));
                let mut out = g.clone();
                for (mut lane, d) in out.lanes_mut(Axis(last)).into_iter().zip(dots.iter()) {
                    lane.mapv_inplace(|v| v - d);
                }
                dx = out * y;
                vec![dx]
            }),
        )
    }

    /// Multiplies by a vector broadcast over the last axis.
    pub fn mul_bcast_last(&self, v: &Var) -> Var {
        self.same_graph(v);
        let x = self.value_ref().clone();
        let w = v.value_ref().clone();
        let d = *x.shape().last().unwrap();
        assert_eq!(w.len(), d, "broadcast vector length mismatch");
        let mut out = x.clone();
        for mut lane in out.lanes_mut(Axis(x.ndim() - 1)).into_iter() {
            for (a, b) in lane.iter_mut().zip(w.iter()) {
                *a *= *b;
            }
        }
        self.binary(
            v,
            out,
            Box::new(|g, _, p| {
                let x = p[0];
                let w = p[1];
                let last = x.ndim() - 1;
                let mut dx = g.clone();
                for mut lane in dx.lanes_mut(Axis(last)).into_iter() {
                    for (a, b) in lane.iter_mut().zip(w.iter()) {
                        *a *= *b;
                    }
                }
                let mut dw = ArrayD::zeros(w.raw_dim());
                let gx = g * x;
                for lane in gx.lanes(Axis(last)).into_iter() {
                    for (a, b) in dw.iter_mut().zip(lane.iter()) {
                        *a += *b;
                    }
                }
                vec![dx, dw]
            }),
        )
    }

    /// Adds a vector broadcast over the last axis.
    pub fn add_bcast_last(&self, v: &Var) -> Var {
        self.same_graph(v);
        let x = self.value_ref().clone();
        let w = v.value_ref().clone();
        let last = x.ndim() - 1;
        assert_eq!(w.len(), x.shape()[last], "broadcast vector length mismatch");
        let mut out = x.clone();
        for mut lane in out.lanes_mut(Axis(last)).into_iter() {
            for (a, b) in lane.iter_mut().zip(w.iter()) {
                *a += *b;
            }
        }
        self.binary(
            v,
            out,
            Box::new(|g, _, p| {
                let w = p[1];
                let last = g.ndim() - 1;
                let mut dw = ArrayD::zeros(w.raw_dim());
                for lane in g.lanes(Axis(last)).into_iter() {
                    for (a, b) in dw.iter_mut().zip(lane.iter()) {
                        *a += *b;
                    }
                }
                vec![g.clone(), dw]
            }),
        )
    }

    /// Normalizes over the last axis: `(x - mean) / sqrt(var + eps)`,
    /// population variance. Affine scale/shift are applied by the caller.
    pub fn layer_norm(&self, eps: f64) -> Var {
        let x = self.value_ref().clone();
        let last = x.ndim() - 1;
        let mut y = x.clone();
        for mut lane in y.lanes_mut(Axis(last)).into_iter() {
            let n = lane.len() as f64;
            let mu: f64 = lane.sum() / n;
            let var: f64 = lane.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|v| (v - mu) * inv);
        }
        self.unary(
            y,
            Box::new(move |g, y, p| {
                let x = p[0];
                let last = x.ndim() - 1;
                let mut dx = g.clone();
                // Recompute inv-std per lane from x.
                let lanes_x = x.lanes(Axis(last));
                let lanes_y = y.lanes(Axis(last));
                let lanes_g = g.lanes(Axis(last));
                for ((mut dlane, xlane), (ylane, glane)) in dx
                    .lanes_mut(Axis(last))
                    .into_iter()
                    .zip(lanes_x.into_iter())
                    .zip(lanes_y.into_iter().zip(lanes_g.into_iter()))
                {
                    let n = xlane.len() as f64;
                    let mu: f64 = xlane.sum() / n;
                    let var: f64 = xlane.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean: f64 = glane.sum() / n;
                    let gydot: f64 =
                        glane.iter().zip(ylane.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, &gv), &yv) in dlane.iter_mut().zip(glane.iter()).zip(ylane.iter()) {
                        *d = inv * (gv - gmean - yv * gydot);
                    }
                }
                vec![dx]
            }),
        )
    }

    /// Bilinear sampling on a `C x H x W` map at `P x 2` locations given as
    /// `(x, y)` with texel centers on the integer lattice; out-of-bounds reads
    /// are zero. Returns `P x C`. Differentiable in both the map and the
    /// locations.
    pub fn bilinear_sample(&self, locs: &Var) -> Var {
        self.same_graph(locs);
        let feat = self.value_ref().clone();
        let l = locs.value_ref().clone();
        let (c, h, w) = {
            let s = feat.shape();
            (s[0], s[1], s[2])
        };
        let p = l.shape()[0];
        let fetch = |feat: &ArrayD<f64>, ci: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                feat[[ci, y as usize, x as usize]]
            }
        };
        let mut out = ArrayD::zeros(IxDyn(&[p, c]));
        for pi in 0..p {
            let x = l[[pi, 0]];
            let y = l[[pi, 1]];
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            for ci in 0..c {
                let v00 = fetch(&feat, ci, yi, xi);
                let v10 = fetch(&feat, ci, yi, xi + 1);
                let v01 = fetch(&feat, ci, yi + 1, xi);
                let v11 = fetch(&feat, ci, yi + 1, xi + 1);
                out[[pi, ci]] = v00 * (1.0 - fx) * (1.0 - fy)
                    + v10 * fx * (1.0 - fy)
                    + v01 * (1.0 - fx) * fy
                    + v11 * fx * fy;
            }
        }
        self.binary(
            locs,
            out,
            Box::new(move |g, _, pv| {
                let feat = pv[0];
                let l = pv[1];
                let mut dfeat = ArrayD::zeros(feat.raw_dim());
                let mut dlocs = ArrayD::zeros(l.raw_dim());
                let np = l.shape()[0];
                let inb = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize;
                for pi in 0..np {
                    let x = l[[pi, 0]];
                    let y = l[[pi, 1]];
                    let x0 = x.floor();
                    let y0 = y.floor();
                    let fx = x - x0;
                    let fy = y - y0;
                    let (xi, yi) = (x0 as isize, y0 as isize);
                    let mut dx_acc = 0.0;
                    let mut dy_acc = 0.0;
                    for ci in 0..c {
                        let go = g[[pi, ci]];
                        let mut corner = |yy: isize, xx: isize, wgt: f64| -> f64 {
                            if inb(yy, xx) {
                                dfeat[[ci, yy as usize, xx as usize]] += go * wgt;
                                feat[[ci, yy as usize, xx as usize]]
                            } else {
                                0.0
                            }
                        };
                        let v00 = corner(yi, xi, (1.0 - fx) * (1.0 - fy));
                        let v10 = corner(yi, xi + 1, fx * (1.0 - fy));
                        let v01 = corner(yi + 1, xi, (1.0 - fx) * fy);
                        let v11 = corner(yi + 1, xi + 1, fx * fy);
                        dx_acc += go * ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy);
                        dy_acc += go * ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx);
                    }
                    dlocs[[pi, 0]] = dx_acc;
                    dlocs[[pi, 1]] = dy_acc;
                }
                vec![dfeat, dlocs]
            }),
        )
    }

    /// Scatter-mean of `N x C` point features into an `C x H x W` grid using
    /// fixed cell assignments (`None` drops the point). Cells with no points
    /// stay zero.
    pub fn scatter_mean(&self, cells: &[Option<(usize, usize)>], h: usize, w: usize) -> Var {
        let feats = self.value_ref().clone();
        let n = feats.shape()[0];
        let c = feats.shape()[1];
        assert_eq!(cells.len(), n, "one cell per point required");
        let mut counts = vec![0usize; h * w];
        for cell in cells.iter().flatten() {
            counts[cell.0 * w + cell.1] += 1;
        }
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for (pi, cell) in cells.iter().enumerate() {
            if let Some((r, col)) = cell {
                let cnt = counts[r * w + col] as f64;
                for ci in 0..c {
                    out[[ci, *r, *col]] += feats[[pi, ci]] / cnt;
                }
            }
        }
        let cells_owned: Vec<Option<(usize, usize)>> = cells.to_vec();
        self.unary(
            out,
            Box::new(move |g, _, p| {
                let mut dfeat = ArrayD::zeros(p[0].raw_dim());
                let c = p[0].shape()[1];
                for (pi, cell) in cells_owned.iter().enumerate() {
                    if let Some((r, col)) = cell {
                        let cnt = counts[r * w + col] as f64;
                        for ci in 0..c {
                            dfeat[[pi, ci]] = g[[ci, *r, *col]] / cnt;
                        }
                    }
                }
                vec![dfeat]
            }),
        )
    }

    /// Naive 2-D convolution: input `C_in x H x W`, weight
    /// `C_out x C_in x KH x KW`, bias `C_out`, zero padding `pad`, stride
    /// `stride`.
    pub fn conv2d(&self, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Var {
        self.same_graph(weight);
        self.same_graph(bias);
        let x = self.value_ref().clone();
        let wt = weight.value_ref().clone();
        let b = bias.value_ref().clone();
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin2, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        assert_eq!(cin, cin2, "conv channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[cout, ho, wo]));
        for oc in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[[oc]];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[[oc, ic, ky, kx]] * x[[ic, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[oc, oy, ox]] = acc;
                }
            }
        }
        self.graph.push(
            out,
            vec![self.id, weight.id, bias.id],
            Some(Box::new(move |g, _, p| {
                let x = p[0];
                let wt = p[1];
                let mut dx = ArrayD::zeros(x.raw_dim());
                let mut dw = ArrayD::zeros(wt.raw_dim());
                let mut db = ArrayD::zeros(p[2].raw_dim());
                let (cout, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let cin = x.shape()[0];
                let (h, w) = (x.shape()[1], x.shape()[2]);
                let (kh, kw) = (wt.shape()[2], wt.shape()[3]);
                for oc in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g[[oc, oy, ox]];
                            if go == 0.0 {
                                continue;
                            }
                            db[[oc]] += go;
                            for ic in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let (iyu, ixu) = (iy as usize, ix as usize);
                                        dw[[oc, ic, ky, kx]] += go * x[[ic, iyu, ixu]];
                                        dx[[ic, iyu, ixu]] += go * wt[[oc, ic, ky, kx]];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx, dw, db]
            })),
        )
    }

    /// Reverses one axis (a pure permutation; its own inverse).
    pub fn flip(&self, axis: usize) -> Var {
        let mut v = self.value_ref().clone();
        v.invert_axis(Axis(axis));
        self.unary(
            v,
            Box::new(move |g, _, _| {
                let mut dg = g.clone();
                dg.invert_axis(Axis(axis));
                vec![dg]
            }),
        )
    }

    /// Counterclockwise quarter turn of the last two axes of a 3-D array,
    /// matching the BEV augmentation convention:
    /// `out[c][i][j] = in[c][h-1-j][i]`.
    pub fn rot90_ccw_hw(&self) -> Var {
        fn rot(v: &ArrayD<f64>) -> ArrayD<f64> {
            let s = v.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let mut out = ArrayD::zeros(IxDyn(&[c, w, h]));
            for ci in 0..c {
                for i in 0..w {
                    for j in 0..h {
                        out[[ci, i, j]] = v[[ci, h - 1 - j, i]];
                    }
                }
            }
            out
        }
        let v = rot(&self.value_ref());
        self.unary(
            v,
            Box::new(|g, _, _| {
                // Inverse rotation = three forward rotations.
                vec![rot(&rot(&rot(g)))]
            }),
        )
    }

    /// Reverse pass from a scalar (size-1) node; seeds with gradient 1.
    pub fn backward(&self) -> Gradients {
        let nodes = self.graph.nodes.borrow();
        assert_eq!(nodes[self.id].value.len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(ArrayD::from_elem(nodes[self.id].value.raw_dim(), 1.0));
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&ArrayD<f64>> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let contribs = back(&g, &node.value, &parent_vals);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (pid, contrib) in node.parents.iter().zip(contribs) {
                    debug_assert_eq!(contrib.shape(), nodes[*pid].value.shape());
                    match &mut grads[*pid] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `f` with respect to `x[i]`.
    fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn assert_grad_matches(
        build: &dyn Fn(&Rc<Graph>, &[f64]) -> (Var, Var),
        x0: Vec<f64>,
        tol: f64,
    ) {
        let g = Graph::new();
        let (leaf, loss) = build(&g, &x0);
        let grads = loss.backward();
        let analytic = grads.wrt(&leaf);
        let mut f = |x: &[f64]| -> f64 {
            let g = Graph::new();
            let (_, loss) = build(&g, x);
            loss.scalar_value()
        };
        for (i, a) in analytic.iter().enumerate() {
            let fd = central_diff(&mut f, &x0, i, 1e-5);
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < tol,
                "grad mismatch at {i}: analytic {a}, fd {fd}"
            );
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn elementwise_chain_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_vec(&mut rng, 12);
        assert_grad_matches(
            &|g, x| {
                let v = g.var_from(&[3, 4], x.to_vec());
                let w = g.var_from(&[3, 4], (0..12).map(|i| 0.1 * i as f64 + 0.2).collect());
                let y = v.mul(&w).add(&v).relu().exp().sub(&w).abs();
                (v, y.sum_all())
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn matmul_transpose_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_vec(&mut rng, 6);
        assert_grad_matches(
            &|g, x| {
                let a = g.var_from(&[2, 3], x.to_vec());
                let b = g.var_from(&[2, 3], vec![0.5, -0.3, 0.2, 0.1, 0.7, -0.6]);
                let y = a.matmul(&b.t()).sum_all();
                (a, y)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn softmax_sigmoid_layernorm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_vec(&mut rng, 8);
        assert_grad_matches(
            &|g, x| {
                let v = g.var_from(&[2, 4], x.to_vec());
                let w = g.var_from(&[4], vec![1.5, 0.5, -0.25, 2.0]);
                let y = v
                    .layer_norm(1e-5)
                    .mul_bcast_last(&w)
                    .add_bcast_last(&w)
                    .softmax_last()
                    .sigmoid()
                    .sum_all();
                (v, y)
            },
            x0,
            1e-4,
        );
    }

    #[test]
    fn narrow_concat_reshape_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_vec(&mut rng, 12);
        assert_grad_matches(
            &|g, x| {
                let v = g.var_from(&[3, 4], x.to_vec());
                let left = v.narrow(1, 0, 2);
                let right = v.narrow(1, 2, 2).scale(2.0);
                let cat = g.concat(1, &[left, right]);
                let y = cat.reshape(&[12]).reshape(&[2, 6]).sum_axis(0).pow_const(2.0).sum_all();
                (v, y)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn bilinear_sample_grad_wrt_map_and_locs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 2x4x4 map and 3 sample locations packed into one leaf.
        let x0: Vec<f64> = rand_vec(&mut rng, 32)
            .into_iter()
            .chain(vec![1.3, 2.6, 0.4, 1.1, 2.2, 0.7])
            .collect();
        assert_grad_matches(
            &|g, x| {
                let leaf = g.var_from(&[38], x.to_vec());
                let map = leaf.narrow(0, 0, 32).reshape(&[2, 4, 4]);
                let locs = leaf.narrow(0, 32, 6).reshape(&[3, 2]);
                let y = map.bilinear_sample(&locs).pow_const(2.0).sum_all();
                (leaf, y)
            },
            x0,
            1e-4,
        );
    }

    #[test]
    fn bilinear_sample_zero_padding_outside() {
        let g = Graph::new();
        let map = g.var_from(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let locs = g.var_from(&[2, 2], vec![-5.0, -5.0, 10.0, 0.5]);
        let out = map.bilinear_sample(&locs);
        assert_eq!(out.value()[[0, 0]], 0.0);
        assert_eq!(out.value()[[1, 0]], 0.0);
    }

    #[test]
    fn scatter_mean_forward_and_grad() {
        let g = Graph::new();
        let feats = g.var_from(&[3, 2], vec![1.0, 10.0, 3.0, 30.0, 5.0, 50.0]);
        let cells = vec![Some((0, 0)), Some((0, 0)), None];
        let grid = feats.scatter_mean(&cells, 2, 2);
        assert_eq!(grid.value()[[0, 0, 0]], 2.0);
        assert_eq!(grid.value()[[1, 0, 0]], 20.0);
        assert_eq!(grid.value()[[0, 1, 1]], 0.0);
        let loss = grid.pow_const(2.0).sum_all();
        let grads = loss.backward();
        let df = grads.wrt(&feats);
        // d/dx of ((x1+x2)/2)^2 = (x1+x2)/2 each.
        assert!((df[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((df[[1, 0]] - 2.0).abs() < 1e-12);
        assert_eq!(df[[2, 0]], 0.0, "dropped point gets no gradient");
    }

    #[test]
    fn conv2d_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n_in = 2 * 5 * 5;
        let n_w = 3 * 2 * 3 * 3;
        let x0: Vec<f64> = rand_vec(&mut rng, n_in + n_w + 3);
        assert_grad_matches(
            &|g, x| {
                let leaf = g.var_from(&[n_in + n_w + 3], x.to_vec());
                let inp = leaf.narrow(0, 0, n_in).reshape(&[2, 5, 5]);
                let wt = leaf.narrow(0, n_in, n_w).reshape(&[3, 2, 3, 3]);
                let b = leaf.narrow(0, n_in + n_w, 3);
                let y = inp.conv2d(&wt, &b, 1, 1).relu().sum_all();
                (leaf, y)
            },
            x0,
            1e-4,
        );
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let g = Graph::new();
        let x = g.var(ArrayD::zeros(IxDyn(&[4, 8, 8])));
        let w = g.var(ArrayD::zeros(IxDyn(&[4, 4, 3, 3])));
        let b = g.var(ArrayD::zeros(IxDyn(&[4])));
        let y = x.conv2d(&w, &b, 2, 1);
        assert_eq!(y.shape(), vec![4, 4, 4]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = g.var_from(&[2], vec![1.0, 2.0]);
        let d = x.detach();
        let loss = d.mul(&x).sum_all();
        let grads = loss.backward();
        // d treated as constant: d(loss)/dx = d.value.
        let gx = grads.wrt(&x);
        assert_eq!(gx[[0]], 1.0);
        assert_eq!(gx[[1]], 2.0);
        assert!(grads.reached(&d), "detached leaf still receives its own grad slot");
        // But nothing flows from d back to x's producer chain.
        let y = g.var_from(&[1], vec![3.0]);
        let z = y.scale(2.0).detach();
        let loss2 = z.sum_all();
        let g2 = loss2.backward();
        assert!(!g2.reached(&y), "gradient must not cross detach");
    }

    #[test]
    fn sqrt_guarded_zero_is_exact() {
        let g = Graph::new();
        let x = g.var_from(&[3], vec![0.0, 4.0, -1.0]);
        let y = x.sqrt_guarded();
        assert_eq!(y.value()[[0]], 0.0);
        assert_eq!(y.value()[[1]], 2.0);
        assert_eq!(y.value()[[2]], 0.0);
        let grads = y.sum_all().backward();
        let gx = grads.wrt(&x);
        assert_eq!(gx[[0]], 0.0);
        assert!((gx[[1]] - 0.25).abs() < 1e-12);
        assert_eq!(gx[[2]], 0.0);
    }

    #[test]
    fn flip_and_rot_are_permutations_with_exact_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = rand_vec(&mut rng, 2 * 4 * 4);
        let g = Graph::new();
        let x = g.var_from(&[2, 4, 4], data.clone());
        assert_eq!(x.flip(2).flip(2).value(), x.value());
        let r = x.rot90_ccw_hw();
        let back = r.rot90_ccw_hw().rot90_ccw_hw().rot90_ccw_hw();
        assert_eq!(back.value(), x.value());
        // Matches the geometry-module rotation on values.
        let arr3 = ndarray::Array3::from_shape_vec((2, 4, 4), data).unwrap();
        let aug = crate::geometry::BevAugmentation { flip_x: false, flip_y: false, rot90: 1 };
        let rotated = crate::geometry::apply_bev_augmentation(&arr3, &aug).unwrap();
        assert_eq!(r.value().into_dimensionality::<ndarray::Ix3>().unwrap(), rotated);
    }

    #[test]
    fn flip_rot_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_vec(&mut rng, 1 * 3 * 3);
        assert_grad_matches(
            &|g, x| {
                let v = g.var_from(&[1, 3, 3], x.to_vec());
                let w = g.var_from(&[1, 3, 3], (0..9).map(|i| i as f64 * 0.3 - 1.0).collect());
                let y = v.rot90_ccw_hw().flip(1).mul(&w).pow_const(2.0).sum_all();
                (v, y)
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let g = Graph::new();
        let x = g.var_from(&[1], vec![3.0]);
        let y = x.mul(&x); // x^2
        let z = y.add(&x); // x^2 + x
        let grads = z.sum_all().backward();
        assert!((grads.wrt(&x)[[0]] - 7.0).abs() < 1e-12);
    }
}
