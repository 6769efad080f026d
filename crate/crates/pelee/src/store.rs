//! Named weight tensors plus their on-disk representation: a JSON manifest
//! describing (name, dtype, shape, offset, length) entries and a contiguous
//! little-endian f32 blob. The pair round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeKind};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || data.len() != expect {
            return Err(Error::Shape(format!(
                "weight data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(WeightTensor { shape, data })
    }
}

/// Weights keyed by the graph node names that reference them. Name-ordered,
/// so manifests and random initialization are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, WeightTensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: WeightTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<WeightTensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    /// Raw values of a stored tensor.
    pub fn slice(&self, name: &str) -> Result<&[f32]> {
        self.tensors
            .get(name)
            .map(|t| t.data.as_slice())
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// View a stored tensor as a 4-D [`Tensor`]; ranks below 4 are padded
    /// with trailing singleton dims (so a (Cout, Cin) linear weight becomes
    /// (Cout, Cin, 1, 1)).
    pub fn tensor4(&self, name: &str) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        if t.shape.len() > 4 {
            return Err(Error::Shape(format!(
                "weight '{}' has rank {} > 4",
                name,
                t.shape.len()
            )));
        }
        let mut dims = [1usize; 4];
        dims[..t.shape.len()].copy_from_slice(&t.shape);
        Tensor::new(dims, t.data.clone())
    }

    /// Deterministic random weights for every tensor a graph references.
    /// Convolution and linear weights are fan-in scaled uniforms; batch-norm
    /// statistics are mild perturbations of the identity so activations stay
    /// well-conditioned through deep stacks.
    pub fn random_for(graph: &Graph, seed: u64) -> Result<WeightStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for node in graph.nodes() {
            match &node.kind {
                NodeKind::Conv(spec) => {
                    let fan_in = (spec.in_channels / spec.groups) * spec.kernel_h * spec.kernel_w;
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    let dims = spec.weight_dims();
                    let len: usize = dims.iter().product();
                    store.insert(
                        format!("{}.weight", node.name),
                        WeightTensor::new(
                            dims.to_vec(),
                            (0..len).map(|_| rng.random_range(-bound..bound)).collect(),
                        )?,
                    );
                    if spec.has_bias {
                        store.insert(
                            format!("{}.bias", node.name),
                            WeightTensor::new(
                                vec![spec.out_channels],
                                (0..spec.out_channels)
                                    .map(|_| rng.random_range(-0.1..0.1))
                                    .collect(),
                            )?,
                        );
                    }
                }
                NodeKind::BatchNorm { channels, .. } => {
                    let c = *channels;
                    let mut param = |name: &str, lo: f32, hi: f32| -> Result<()> {
                        store.insert(
                            format!("{}.{}", node.name, name),
                            WeightTensor::new(
                                vec![c],
                                (0..c).map(|_| rng.random_range(lo..hi)).collect(),
                            )?,
                        );
                        Ok(())
                    };
                    param("gamma", 0.9, 1.1)?;
                    param("beta", -0.1, 0.1)?;
                    param("mean", -0.1, 0.1)?;
                    param("var", 0.8, 1.25)?;
                }
                NodeKind::Linear {
                    in_features,
                    out_features,
                } => {
                    let bound = (6.0 / *in_features as f64).sqrt() as f32;
                    store.insert(
                        format!("{}.weight", node.name),
                        WeightTensor::new(
                            vec![*out_features, *in_features],
                            (0..out_features * in_features)
                                .map(|_| rng.random_range(-bound..bound))
                                .collect(),
                        )?,
                    );
                    store.insert(
                        format!("{}.bias", node.name),
                        WeightTensor::new(
                            vec![*out_features],
                            (0..*out_features).map(|_| rng.random_range(-0.01..0.01)).collect(),
                        )?,
                    );
                }
                _ => {}
            }
        }
        Ok(store)
    }

    /// Write the manifest + blob pair. `prefix` yields
    /// `<prefix>.manifest.json` and `<prefix>.bin`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob: Vec<u8> = Vec::new();
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: "f32".to_string(),
                shape: t.shape.clone(),
                offset,
                length: (t.data.len() * 4) as u64,
            });
        }
        let manifest = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(manifest_path(prefix), text)?;
        fs::write(blob_path(prefix), blob)?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<WeightStore> {
        let text = fs::read_to_string(manifest_path(prefix))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("weight manifest: {e}")))?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "weight manifest version {} unsupported (expected {MANIFEST_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let blob = fs::read(blob_path(prefix))?;
        let mut store = WeightStore::new();
        for e in &manifest.entries {
            if e.dtype != "f32" {
                return Err(Error::Format(format!(
                    "weight '{}' has unsupported dtype '{}'",
                    e.name, e.dtype
                )));
            }
            let count: usize = e.shape.iter().product();
            if e.length as usize != count * 4 {
                return Err(Error::Format(format!(
                    "weight '{}' length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let start = e.offset as usize;
            let end = start + e.length as usize;
            if end > blob.len() {
                return Err(Error::Format(format!(
                    "weight '{}' extends past end of blob ({} > {})",
                    e.name,
                    end,
                    blob.len()
                )));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if store.contains(&e.name) {
                return Err(Error::Format(format!("duplicate weight '{}'", e.name)));
            }
            store.insert(e.name.clone(), WeightTensor::new(e.shape.clone(), data)?);
        }
        Ok(store)
    }
}

fn manifest_path(prefix: &Path) -> std::path::PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".manifest.json");
    p.into()
}

fn blob_path(prefix: &Path) -> std::path::PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".bin");
    p.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, NodeKind};
    use crate::ops::ConvSpec;

    #[test]
    fn random_init_is_deterministic_and_complete() {
        let mut b = GraphBuilder::new();
        let input = b.input("input").unwrap();
        let conv = b
            .add("c", NodeKind::Conv(ConvSpec::simple(3, 8, 3, 1, 1)), &[input])
            .unwrap();
        let bn = b
            .add("c.bn", NodeKind::BatchNorm { channels: 8, epsilon: 1e-5 }, &[conv])
            .unwrap();
        let g = b.build(&[bn]).unwrap();
        let a = WeightStore::random_for(&g, 7).unwrap();
        let b2 = WeightStore::random_for(&g, 7).unwrap();
        assert_eq!(a, b2);
        g.check_weights(&a).unwrap();
        assert!(a.slice("c.bn.var").unwrap().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn save_load_preserves_every_bit() {
        let mut store = WeightStore::new();
        // values chosen to stress the encoding, including denormals
        store.insert(
            "w",
            WeightTensor::new(vec![2, 3], vec![0.1, -0.0, 1e-40, f32::MAX, -2.5, 3.0]).unwrap(),
        );
        store.insert("b", WeightTensor::new(vec![2], vec![1.5, -0.25]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("model");
        store.save(&prefix).unwrap();
        let loaded = WeightStore::load(&prefix).unwrap();
        assert_eq!(loaded.len(), 2);
        for name in ["w", "b"] {
            let a = store.get(name).unwrap();
            let b = loaded.get(name).unwrap();
            assert_eq!(a.shape, b.shape);
            let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        // and the files themselves round-trip byte-identically
        let manifest1 = fs::read(manifest_path(&prefix)).unwrap();
        let blob1 = fs::read(blob_path(&prefix)).unwrap();
        loaded.save(&prefix).unwrap();
        assert_eq!(manifest1, fs::read(manifest_path(&prefix)).unwrap());
        assert_eq!(blob1, fs::read(blob_path(&prefix)).unwrap());
    }
}
