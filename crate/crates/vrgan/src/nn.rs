//! Parameter bookkeeping, weight initialization, the Adam optimizer and the
//! single-file checkpoint archive.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Ordered, named f32 arrays. Order is insertion order and is part of the
/// checkpoint contract.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, ArrayD<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, arr: ArrayD<f32>) {
        let prev = self.entries.insert(name.to_string(), arr);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f32>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Bind every entry as a tape leaf.
    pub fn bind(&self, tape: &Tape<f32>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Replace contents with `src`, requiring identical names and shapes.
    /// Used when restoring checkpointed weights into a freshly built model.
    pub fn load_from(&mut self, src: ParamSet) -> crate::error::Result<()> {
        if self.entries.len() != src.entries.len() {
            return Err(crate::error::Error::CheckpointMismatch(format!(
                "parameter count {} does not match checkpoint {}",
                self.entries.len(),
                src.entries.len()
            )));
        }
        for (name, arr) in &src.entries {
            match self.entries.get(name) {
                Some(existing) if existing.shape() == arr.shape() => {}
                Some(existing) => {
                    return Err(crate::error::Error::CheckpointMismatch(format!(
                        "parameter {name}: expected shape {:?}, checkpoint has {:?}",
                        existing.shape(),
                        arr.shape()
                    )))
                }
                None => {
                    return Err(crate::error::Error::CheckpointMismatch(format!(
                        "unexpected parameter {name} in checkpoint"
                    )))
                }
            }
        }
        self.entries = src.entries;
        Ok(())
    }

    /// SHA-256 over names and raw little-endian bytes; used by isolation
    /// tests to prove a step left a model untouched.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, arr) in &self.entries {
            h.update(name.as_bytes());
            for v in arr.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Per-tape handles for a bound `ParamSet`.
pub struct Bound {
    vars: IndexMap<String, Var<f32>>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var<f32> {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
            .clone()
    }

    pub fn all(&self) -> Vec<&Var<f32>> {
        self.vars.values().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }
}

/// Extract gradients of `loss` w.r.t. every entry of `bound`, keyed by name.
pub fn gradients(loss: &Var<f32>, bound: &Bound) -> IndexMap<String, ArrayD<f32>> {
    let wrt: Vec<&Var<f32>> = bound.vars.values().collect();
    let gs = crate::autodiff::grad(loss, &wrt);
    bound
        .vars
        .keys()
        .cloned()
        .zip(gs.into_iter().map(|g| g.value()))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: IndexMap<String, ArrayD<f32>>,
    v: IndexMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, ArrayD<f32>>) {
        self.t += 1;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let lr = self.cfg.learning_rate as f32;
        let eps = self.cfg.epsilon as f32;
        let bc1 = 1.0 - (self.cfg.beta1).powi(self.t as i32) as f32;
        let bc2 = 1.0 - (self.cfg.beta2).powi(self.t as i32) as f32;
        for (name, p) in params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(IxDyn(p.shape())));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(IxDyn(p.shape())));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

pub fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        rng.sample::<f32, _>(StandardNormal) * std
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

// ---------------------------------------------------------------------------
// Checkpoint archive: magic, JSON header (specs, stats, array directory),
// then raw little-endian f32 payloads in directory order.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"VRGANCK1";

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct ArrayEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CheckpointHeader {
    pub method: String,
    pub spec: serde_json::Value,
    pub spec_sha256: String,
    pub extra: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

pub fn spec_hash(spec: &serde_json::Value) -> String {
    use sha2::{Digest, Sha256};
    let canon = serde_json::to_string(spec).expect("spec serializes");
    format!("{:x}", Sha256::digest(canon.as_bytes()))
}

/// Write named parameter groups into one archive file.
pub fn save_checkpoint(
    path: &Path,
    method: &str,
    spec: serde_json::Value,
    extra: serde_json::Value,
    groups: &[(&str, &ParamSet)],
) -> Result<()> {
    let mut arrays = Vec::new();
    for (gname, set) in groups {
        for (name, arr) in set.iter() {
            arrays.push(ArrayEntry {
                group: gname.to_string(),
                name: name.to_string(),
                shape: arr.shape().to_vec(),
            });
        }
    }
    let header = CheckpointHeader {
        method: method.to_string(),
        spec_sha256: spec_hash(&spec),
        spec,
        extra,
        arrays,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(CKPT_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
    for (_gname, set) in groups {
        for (_name, arr) in set.iter() {
            let mut buf = Vec::with_capacity(arr.len() * 4);
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Read a checkpoint archive back into grouped `ParamSet`s.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, IndexMap<String, ParamSet>)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::InvalidInput(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; hlen];
    f.read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let mut groups: IndexMap<String, ParamSet> = IndexMap::new();
    for entry in &header.arrays {
        let count: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; count * 4];
        f.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::InvalidInput(format!("bad array shape in checkpoint: {e}")))?;
        groups
            .entry(entry.group.clone())
            .or_default()
            .insert(&entry.name, arr);
    }
    Ok((header, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_moves_toward_minimum() {
        // minimize (p - 3)^2 elementwise
        let mut params = ParamSet::new();
        params.insert("p", zeros(&[4]));
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        for _ in 0..300 {
            let g = params.get("p").mapv(|v| 2.0 * (v - 3.0));
            let mut grads = IndexMap::new();
            grads.insert("p".to_string(), g);
            opt.step(&mut params, &grads);
        }
        for &v in params.get("p").iter() {
            assert!((v - 3.0).abs() < 1e-2);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamSet::new();
        a.insert("w", he_normal(&mut rng, &[2, 3], 3));
        a.insert("b", zeros(&[2]));
        let mut bufs = ParamSet::new();
        bufs.insert("bn.mean", ones(&[2]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = serde_json::json!({"kind": "test", "width": 2});
        save_checkpoint(
            &path,
            "vrgan",
            spec.clone(),
            serde_json::json!({}),
            &[("model.params", &a), ("model.buffers", &bufs)],
        )
        .unwrap();
        let (header, groups) = load_checkpoint(&path).unwrap();
        assert_eq!(header.method, "vrgan");
        assert_eq!(header.spec_sha256, spec_hash(&spec));
        assert_eq!(groups["model.params"].get("w"), a.get("w"));
        assert_eq!(groups["model.buffers"].get("bn.mean"), bufs.get("bn.mean"));
    }

    #[test]
    fn content_hash_tracks_changes() {
        let mut p = ParamSet::new();
        p.insert("w", zeros(&[3]));
        let h0 = p.content_hash();
        assert_eq!(h0, p.content_hash());
        p.get_mut("w")[[0]] = 1.0;
        assert_ne!(h0, p.content_hash());
    }
}
