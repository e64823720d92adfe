//! Named parameter store with Adam state and checkpoint I/O.
//!
//! Parameters are registered in a deterministic order during model
//! construction; checkpoints serialize them in that order as a
//! `manifest.json` (name, shape, dtype, byte offset, length) next to a
//! `weights.bin` of concatenated little-endian f32 values.

use crate::rng::SplitMix64;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter {0}")]
    Duplicate(String),
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint weights.bin length {found} does not match manifest total {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("checkpoint entry {name}: shape product {shape_len} != length {len}")]
    BadEntry {
        name: String,
        shape_len: usize,
        len: usize,
    },
    #[error("unsupported dtype {0:?} in checkpoint")]
    BadDtype(String),
}

struct Entry {
    value: ArrayD<f32>,
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

/// All trainable tensors of a model, keyed by name, in registration order.
#[derive(Default)]
pub struct ParamStore {
    order: Vec<String>,
    entries: HashMap<String, Entry>,
    pub adam_t: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f32>) -> Result<(), ParamError> {
        if self.entries.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let zeros = ArrayD::zeros(value.raw_dim());
        self.order.push(name.to_string());
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                m: zeros.clone(),
                v: zeros,
            },
        );
        Ok(())
    }

    /// Kaiming fan-in normal init for conv kernels (Cout,Cin,kz,ky,kx) and
    /// linear weights (out,in).
    pub fn register_kaiming(&mut self, name: &str, shape: &[usize], rng: &mut SplitMix64) {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.normal() as f32 * std).collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        self.register(name, value).expect("unique param name");
    }

    pub fn register_zeros(&mut self, name: &str, shape: &[usize]) {
        self.register(name, ArrayD::zeros(IxDyn(shape)))
            .expect("unique param name");
    }

    pub fn register_ones(&mut self, name: &str, shape: &[usize]) {
        self.register(name, ArrayD::from_elem(IxDyn(shape), 1.0))
            .expect("unique param name");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        &self.entries[name].value
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f32>) {
        let e = self.entries.get_mut(name).expect("known parameter");
        assert_eq!(e.value.shape(), value.shape(), "parameter shape change");
        e.value = value;
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn num_scalars(&self) -> usize {
        self.order.iter().map(|n| self.entries[n].value.len()).sum()
    }

    /// Scales all gradients in place so their global L2 norm is at most
    /// `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(grads: &mut HashMap<String, ArrayD<f32>>, max_norm: f32) -> f32 {
        let sq: f64 = grads
            .values()
            .map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum();
        let norm = sq.sqrt() as f32;
        if norm > max_norm {
            let s = max_norm / norm;
            for g in grads.values_mut() {
                g.mapv_inplace(|v| v * s);
            }
        }
        norm
    }

    /// One Adam update with (beta1, beta2, eps) = (0.9, 0.999, 1e-8).
    pub fn adam_step(&mut self, grads: &HashMap<String, ArrayD<f32>>, lr: f32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let bc1 = 1.0 - B1.powi(t);
        let bc2 = 1.0 - B2.powi(t);
        for name in &self.order {
            let Some(g) = grads.get(name) else { continue };
            let e = self.entries.get_mut(name).unwrap();
            azip_update(e, g, lr, B1, B2, EPS, bc1, bc2);
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), ParamError> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Vec::with_capacity(self.order.len());
        let mut blob: Vec<u8> = Vec::with_capacity(self.num_scalars() * 4);
        for name in &self.order {
            let value = &self.entries[name].value;
            let offset = blob.len();
            for &v in value.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: value.shape().to_vec(),
                dtype: "f32".to_string(),
                offset,
                length: value.len(),
            });
        }
        let mut wf = std::fs::File::create(dir.join("weights.bin"))?;
        wf.write_all(&blob)?;
        let mf = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(mf, &manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ParamError> {
        let mf = std::fs::File::open(dir.join("manifest.json"))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_reader(mf)?;
        let mut blob = Vec::new();
        std::fs::File::open(dir.join("weights.bin"))?.read_to_end(&mut blob)?;
        let total: usize = manifest.iter().map(|e| e.length).sum();
        if blob.len() != total * 4 {
            return Err(ParamError::SizeMismatch {
                expected: total * 4,
                found: blob.len(),
            });
        }
        let mut store = Self::new();
        for e in manifest {
            if e.dtype != "f32" {
                return Err(ParamError::BadDtype(e.dtype));
            }
            let shape_len: usize = e.shape.iter().product();
            if shape_len != e.length {
                return Err(ParamError::BadEntry {
                    name: e.name,
                    shape_len,
                    len: e.length,
                });
            }
            let bytes = &blob[e.offset..e.offset + e.length * 4];
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|_| {
                ParamError::BadEntry {
                    name: e.name.clone(),
                    shape_len,
                    len: e.length,
                }
            })?;
            store.register(&e.name, value)?;
        }
        Ok(store)
    }
}

fn azip_update(
    e: &mut Entry,
    g: &ArrayD<f32>,
    lr: f32,
    b1: f32,
    b2: f32,
    eps: f32,
    bc1: f32,
    bc2: f32,
) {
    let value = e.value.as_slice_mut().unwrap();
    let m = e.m.as_slice_mut().unwrap();
    let v = e.v.as_slice_mut().unwrap();
    let gs = g.as_slice().expect("contiguous gradient");
    for i in 0..value.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * gs[i];
        v[i] = b2 * v[i] + (1.0 - b2) * gs[i] * gs[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        value[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_duplicate() {
        let mut s = ParamStore::new();
        s.register_zeros("a", &[2, 3]);
        assert!(s.register("a", ArrayD::zeros(IxDyn(&[1]))).is_err());
        assert_eq!(s.names(), &["a".to_string()]);
        assert_eq!(s.num_scalars(), 6);
    }

    #[test]
    fn kaiming_statistics() {
        let mut s = ParamStore::new();
        let mut rng = SplitMix64::new(9);
        s.register_kaiming("w", &[8, 4, 3, 3, 3], &mut rng);
        let w = s.get("w");
        let n = w.len() as f32;
        let mean = w.sum() / n;
        let var = w.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let expect = 2.0 / (4.0 * 27.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!(
            (var - expect).abs() / expect < 0.25,
            "var {var} vs {expect}"
        );
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // minimize f(x) = x^2 from x = 3
        let mut s = ParamStore::new();
        s.register("x", ArrayD::from_elem(IxDyn(&[1]), 3.0))
            .unwrap();
        for _ in 0..500 {
            let x = s.get("x")[[0]];
            let mut grads = HashMap::new();
            grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0 * x));
            s.adam_step(&grads, 0.05);
        }
        assert!(s.get("x")[[0]].abs() < 0.05);
    }

    #[test]
    fn clip_global_norm_scales() {
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[4]), 3.0));
        grads.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[4]), 4.0));
        // norm = sqrt(4*9 + 4*16) = 10
        let pre = ParamStore::clip_global_norm(&mut grads, 5.0);
        assert!((pre - 10.0).abs() < 1e-5);
        let sq: f32 = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum();
        assert!((sq.sqrt() - 5.0).abs() < 1e-4);
        // below the limit: untouched
        let pre2 = ParamStore::clip_global_norm(&mut grads, 50.0);
        assert!((pre2 - 5.0).abs() < 1e-4);
        let sq2: f32 = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum();
        assert!((sq2.sqrt() - 5.0).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        s.register_kaiming("conv.w", &[2, 1, 3, 3, 3], &mut rng);
        s.register_zeros("conv.b", &[2]);
        s.register_ones("norm.scale", &[2]);
        s.save(dir.path()).unwrap();
        let loaded = ParamStore::load(dir.path()).unwrap();
        assert_eq!(loaded.names(), s.names());
        for name in s.names() {
            assert_eq!(loaded.get(name), s.get(name), "param {name}");
        }
    }

    #[test]
    fn checkpoint_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.register_ones("a", &[4]);
        s.save(dir.path()).unwrap();
        let wpath = dir.path().join("weights.bin");
        let blob = std::fs::read(&wpath).unwrap();
        std::fs::write(&wpath, &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(
            ParamStore::load(dir.path()),
            Err(ParamError::SizeMismatch { .. })
        ));
    }
}
