//! Named parameter collections and the binary checkpoint format.
//!
//! A checkpoint is a pair of files: `<stem>.bin` holding every tensor as
//! little-endian `f64` values back to back, and `<stem>.json` describing the
//! layout (name, shape, offset in values) plus free-form metadata.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub trait ParamSet {
    /// Typed handles for the tensors once they are on a tape.
    type Vars;

    fn named(&self) -> Vec<(&'static str, &Tensor)>;

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    /// Rebuilds typed handles from vars listed in [`ParamSet::named`] order.
    fn vars_from(vars: &[Var]) -> Self::Vars;

    /// Puts every tensor on the tape as a trainable leaf, in `named` order.
    fn bind_list(&self, tape: &mut Tape) -> Vec<Var> {
        self.named()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect()
    }

    fn bind_constants(&self, tape: &mut Tape) -> Self::Vars {
        let vars: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        Self::vars_from(&vars)
    }

    fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Hash over the exact bit patterns of every value.
    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.named() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Overwrites values from a list in `named` order; shapes must match.
    fn assign(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.named_mut();
        if slots.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for ((name, slot), v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            **slot = v.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "f64-le";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint(
    stem: impl AsRef<Path>,
    tensors: &[(String, Tensor)],
    metadata: serde_json::Value,
) -> Result<Vec<PathBuf>> {
    let (bin, json) = paths(stem.as_ref());
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows(), t.cols()],
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        tensors: entries,
        metadata,
    };
    if let Some(parent) = bin.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
    fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
    Ok(vec![bin, json])
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    stem: impl AsRef<Path>,
) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let (bin, json) = paths(stem.as_ref());
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&json, e.line(), e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "{} is not a whole number of f64 values",
            bin.display()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let [r, c] = entry.shape;
        let end = entry.offset + r * c;
        if end > values.len() {
            return Err(Error::Checkpoint(format!(
                "{} runs past the end of the data",
                entry.name
            )));
        }
        let t = Tensor::new(r, c, values[entry.offset..end].to_vec())?;
        tensors.push((entry.name.clone(), t));
    }
    Ok((manifest, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = vec![
            (
                "a".to_string(),
                Tensor::from_fn(2, 3, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0)),
            ),
            ("b".to_string(), Tensor::scalar(-1.0e-300)),
        ];
        let stem = dir.path().join("model");
        save_checkpoint(&stem, &tensors, serde_json::json!({"k": 1})).unwrap();
        let (manifest, back) = load_checkpoint(&stem).unwrap();
        assert_eq!(back, tensors);
        assert_eq!(manifest.metadata["k"], 1);
        assert_eq!(manifest.tensors[1].offset, 6);
    }

    #[test]
    fn truncated_data_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        save_checkpoint(
            &stem,
            &[("a".into(), Tensor::ones(2, 2))],
            serde_json::Value::Null,
        )
        .unwrap();
        fs::write(stem.with_extension("bin"), [0u8; 16]).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }
}
