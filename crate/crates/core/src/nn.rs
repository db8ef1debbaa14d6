//! Named parameter storage, initialization, the Adam optimizer, and the
//! checkpoint format (binary blob of little-endian f64 arrays plus a JSON
//! manifest mapping name to shape/dtype/offset).

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};

/// Ordered, named parameter arrays. Creation order is deterministic and fixes
/// the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: HashMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter initialized by `init` if absent, returning its value.
    pub fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: impl FnOnce(&mut dyn FnMut() -> f64) -> ArrayD<f64>,
        rng: &mut ChaCha8Rng,
    ) -> ArrayD<f64> {
        if !self.values.contains_key(name) {
            let mut draw = || rng.gen_range(-1.0..1.0);
            let v = init(&mut draw);
            assert_eq!(v.shape(), shape, "init shape mismatch for {name}");
            self.names.push(name.to_string());
            self.values.insert(name.to_string(), v);
        }
        self.values[name].clone()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        if !self.values.contains_key(name) {
            self.names.push(name.to_string());
        }
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.values.get(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.names.iter().map(|n| self.values[n].len()).sum()
    }
}

/// One step's view of the parameters as graph leaves, so gradients can be
/// collected by name after backward.
pub struct ParamBinding {
    vars: RefCell<HashMap<String, Var>>,
    graph: Rc<Graph>,
}

impl ParamBinding {
    pub fn new(graph: &Rc<Graph>) -> Self {
        ParamBinding { vars: RefCell::new(HashMap::new()), graph: Rc::clone(graph) }
    }

    /// Leaf var for `name`, creating it from the store on first use.
    pub fn var(&self, store: &ParamStore, name: &str) -> Var {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars.get(name) {
            return v.clone();
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not initialized"))
            .clone();
        let v = self.graph.var(value);
        vars.insert(name.to_string(), v.clone());
        v
    }

    /// Collects per-parameter gradients after a backward pass.
    pub fn gradients(&self, grads: &Gradients) -> HashMap<String, ArrayD<f64>> {
        self.vars
            .borrow()
            .iter()
            .map(|(name, var)| (name.clone(), grads.wrt(var)))
            .collect()
    }
}

/// Xavier-style uniform initialization for a 2-D weight.
pub fn xavier(shape: &[usize], draw: &mut dyn FnMut() -> f64) -> ArrayD<f64> {
    let fan_in = if shape.len() >= 2 { shape[1..].iter().product::<usize>() } else { shape[0] };
    let fan_out = shape[0];
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || draw() * bound)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Adam with bias correction; state kept per parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, ArrayD<f64>>,
    v: HashMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &HashMap<String, ArrayD<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        // Deterministic order: iterate the store's registration order.
        for name in store.names.clone() {
            let Some(g) = grads.get(&name) else {
                continue;
            };
            let p = store.values.get_mut(&name).unwrap();
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            });
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Offset into the blob, in elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    entries: Vec<CheckpointEntry>,
}

/// Writes `<path>.bin` (little-endian f64 blob) and `<path>.json` (manifest).
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    for name in store.names() {
        let v = &store.values[name];
        entries.push(CheckpointEntry {
            name: name.clone(),
            shape: v.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
            len: v.len() as u64,
        });
        for x in v.iter() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        offset += v.len() as u64;
    }
    let manifest = CheckpointManifest { format: "pointbox-params-v1".to_string(), entries };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path.with_extension("bin"), &blob)?;
    fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let manifest_path = path.with_extension("json");
    let blob_path = path.with_extension("bin");
    if !manifest_path.exists() || !blob_path.exists() {
        return Err(Error::missing(format!("checkpoint {}", path.display())));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != "pointbox-params-v1" {
        return Err(Error::config(format!("unknown checkpoint format {}", manifest.format)));
    }
    let blob = fs::read(&blob_path)?;
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        if e.dtype != "f64" {
            return Err(Error::config(format!("unsupported dtype {}", e.dtype)));
        }
        let start = e.offset as usize * 8;
        let end = start + e.len as usize * 8;
        if end > blob.len() {
            return Err(Error::shape(format!("checkpoint blob truncated at {}", e.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|_| Error::shape(format!("bad shape for {}", e.name)))?;
        store.insert(&e.name, arr);
    }
    Ok(store)
}

/// y = x W^T + b for `x: [.., in]`, `w: [out, in]`, `b: [out]`.
pub fn linear(x: &Var, w: &Var, b: &Var) -> Var {
    let shape = x.shape();
    let d_in = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product::<usize>();
    let x2 = x.reshape(&[rows, d_in]);
    let y = x2.matmul(&w.t()).add_bcast_last(b);
    let d_out = w.shape()[0];
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(d_out);
    y.reshape(&out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn param_registration_is_idempotent_and_ordered() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = store.get_or_init("w.a", &[2, 2], |d| xavier(&[2, 2], d), &mut rng);
        let b = store.get_or_init("w.a", &[2, 2], |d| xavier(&[2, 2], d), &mut rng);
        assert_eq!(a, b, "second init must return the stored value");
        store.get_or_init("w.b", &[3], |_| zeros(&[3]), &mut rng);
        assert_eq!(store.names(), &["w.a".to_string(), "w.b".to_string()]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store.get_or_init("layer.w", &[4, 3], |d| xavier(&[4, 3], d), &mut rng);
        store.get_or_init("layer.b", &[4], |_| zeros(&[4]), &mut rng);
        let path = dir.path().join("ckpt");
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.names(), store.names());
        for n in store.names() {
            assert_eq!(loaded.get(n).unwrap(), store.get(n).unwrap());
        }
        // Re-saving produces byte-identical files.
        let path2 = dir.path().join("ckpt2");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(path.with_extension("bin")).unwrap(),
            std::fs::read(path2.with_extension("bin")).unwrap()
        );
        assert!(load_checkpoint(&dir.path().join("absent")).is_err());
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        store.get_or_init("x", &[2], |_| ArrayD::from_shape_vec(IxDyn(&[2]), vec![5.0, -3.0]).unwrap(), &mut rng);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = Graph::new();
            let binding = ParamBinding::new(&g);
            let x = binding.var(&store, "x");
            let loss = x.mul(&x).sum_all();
            let grads = loss.backward();
            opt.apply(&mut store, &binding.gradients(&grads));
        }
        let x = store.get("x").unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-2), "Adam should reach the minimum, got {x:?}");
    }

    #[test]
    fn linear_shapes_and_values() {
        let g = Graph::new();
        let x = g.var_from(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let w = g.var_from(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = g.var_from(&[2], vec![0.5, -0.5]);
        let y = linear(&x, &w, &b);
        assert_eq!(y.shape(), vec![2, 2]);
        let v = y.value();
        assert_eq!(v[[0, 0]], 1.5);
        assert_eq!(v[[0, 1]], 3.5);
        assert_eq!(v[[1, 0]], 2.5);
        assert_eq!(v[[1, 1]], 4.5);
    }
}
