//! Named parameter collections and their on-disk form.
//!
//! A parameter file is a JSON manifest plus a sibling blob of raw
//! little-endian `f64` values. The manifest lists each array's name, shape and
//! element offset into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "deq-params/1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// A set with the same names and shapes, built from `values` in order.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<ParamSet> {
        if values.len() != self.entries.len() {
            return Err(Error::shape("with_values", &[self.entries.len()], &[values.len()]));
        }
        let mut entries = Vec::with_capacity(values.len());
        for ((name, old), new) in self.entries.iter().zip(values) {
            if old.shape() != new.shape() {
                return Err(Error::shape("with_values", old.shape(), new.shape()));
            }
            entries.push((name.clone(), new));
        }
        Ok(ParamSet { entries })
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// All parameters concatenated in order.
    pub fn flatten(&self) -> Tensor {
        Tensor::vector(self.tensors().flat_map(|t| t.data().iter().copied()).collect())
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&self, flat: &Tensor) -> Result<ParamSet> {
        if flat.len() != self.count() {
            return Err(Error::shape("unflatten", &[self.count()], flat.shape()));
        }
        let mut offset = 0;
        let mut values = Vec::with_capacity(self.len());
        for t in self.tensors() {
            values.push(Tensor::new(
                t.shape().to_vec(),
                flat.data()[offset..offset + t.len()].to_vec(),
            )?);
            offset += t.len();
        }
        self.with_values(values)
    }

    pub fn add_scaled(&self, c: f64, other: &ParamSet) -> Result<ParamSet> {
        let values = self
            .tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.axpy(c, b))
            .collect::<Result<Vec<_>>>()?;
        self.with_values(values)
    }

    pub fn save(&self, manifest_path: &Path, model_kind: &str, metadata: serde_json::Value) -> Result<()> {
        let blob_path = blob_path_for(manifest_path);
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(manifest_path, "manifest path has no file name"))?
            .to_string();

        let mut blob = Vec::with_capacity(self.count() * 8);
        let mut arrays = Vec::with_capacity(self.len());
        let mut offset = 0;
        for (name, t) in self.iter() {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            arrays.push(ArrayEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            model: model_kind.to_string(),
            blob: blob_name,
            arrays,
            metadata,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        Ok(())
    }

    /// Reads a parameter file, returning the model kind recorded in it.
    pub fn load(manifest_path: &Path) -> Result<(String, ParamSet, serde_json::Value)> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(Error::format(
                manifest_path,
                format!("unsupported format `{}`", manifest.format),
            ));
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() % 8 != 0 {
            return Err(Error::format(&blob_path, "blob length is not a multiple of 8"));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let mut params = ParamSet::new();
        for entry in manifest.arrays {
            let end = entry.offset + entry.len;
            if end > values.len() {
                return Err(Error::format(
                    &blob_path,
                    format!("array `{}` runs past the end of the blob", entry.name),
                ));
            }
            let t = Tensor::new(entry.shape, values[entry.offset..end].to_vec())
                .map_err(|e| Error::format(manifest_path, format!("array `{}`: {e}", entry.name)))?;
            if params.get(&entry.name).is_some() {
                return Err(Error::format(manifest_path, format!("duplicate array `{}`", entry.name)));
            }
            params.insert(entry.name, t);
        }
        Ok((manifest.model, params, manifest.metadata))
    }
}

/// `model.json` → `model.bin`.
pub fn blob_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    model: String,
    blob: String,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("W", Tensor::from_rows(&[&[1.0, -2.5], &[f64::MIN_POSITIVE, 3.0e300]]));
        p.insert("b", Tensor::vector(vec![0.1, -0.0]));
        p
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p = sample();
        p.save(&path, "test", serde_json::json!({"seed": 3})).unwrap();
        assert!(dir.path().join("model.bin").exists());
        let (kind, back, meta) = ParamSet::load(&path).unwrap();
        assert_eq!(kind, "test");
        assert_eq!(meta["seed"], 3);
        for ((n1, a), (n2, b)) in p.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        sample().save(&path, "test", serde_json::Value::Null).unwrap();
        let blob = dir.path().join("model.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(ParamSet::load(&path).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let p = sample();
        let flat = p.flatten();
        assert_eq!(flat.len(), 6);
        assert_eq!(p.unflatten(&flat).unwrap(), p);
    }
}
