//! Single-file binary container: a JSON manifest followed by a raw
//! little-endian value blob. Used for model checkpoints and dataset caches;
//! round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use dat_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::init::RngStream;
use crate::model::{build_dat, DatModel, DatModelConfig, ParamKind};

const MAGIC: &[u8; 8] = b"DATBLOB1";

pub fn write_blob_file(path: &Path, manifest: &serde_json::Value, blob: &[u8]) -> Result<()> {
    let manifest_bytes = serde_json::to_vec(manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    f.write_all(blob)?;
    Ok(())
}

pub fn read_blob_file(path: &Path) -> Result<(serde_json::Value, Vec<u8>)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a blob container", path.display())));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut manifest_bytes = vec![0u8; len];
    f.read_exact(&mut manifest_bytes)?;
    let manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Format(e.to_string()))?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    Ok((manifest, blob))
}

#[derive(Serialize, Deserialize)]
struct CkptManifest {
    schema_version: u32,
    model: DatModelConfig,
    entries: Vec<CkptEntry>,
}

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

pub fn save_model<T: Scalar>(model: &DatModel<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    model.visit_tensors(&mut |name, _kind, t| {
        entries.push(CkptEntry {
            name: name.to_string(),
            dtype: T::DTYPE.name().to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes_vec());
        }
    });
    let manifest = CkptManifest {
        schema_version: 1,
        model: model.config.clone(),
        entries,
    };
    let manifest = serde_json::to_value(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_blob_file(path, &manifest, &blob)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<DatModel<T>> {
    let (manifest, blob) = read_blob_file(path)?;
    let manifest: CkptManifest =
        serde_json::from_value(manifest).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.schema_version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint schema {}",
            manifest.schema_version
        )));
    }
    let mut model = build_dat::<T>(&manifest.model, &RngStream::new(0))?;
    let by_name: std::collections::HashMap<&str, &CkptEntry> = manifest
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let elem = T::DTYPE.size_bytes();
    let mut missing = Vec::new();
    let mut result = Ok(());
    model.visit_tensors_mut(&mut |name, _kind: ParamKind, t| {
        let entry = match by_name.get(name) {
            Some(e) => *e,
            None => {
                missing.push(name.to_string());
                return;
            }
        };
        if entry.dtype != T::DTYPE.name() {
            result = Err(Error::Format(format!(
                "{name}: checkpoint dtype {} does not match {}",
                entry.dtype,
                T::DTYPE.name()
            )));
            return;
        }
        if entry.shape != t.shape() {
            result = Err(Error::Format(format!(
                "{name}: checkpoint shape {:?} does not match model {:?}",
                entry.shape,
                t.shape()
            )));
            return;
        }
        let n = t.numel();
        let start = entry.offset as usize;
        let data: Vec<T> = (0..n)
            .map(|i| T::from_le_slice(&blob[start + i * elem..start + (i + 1) * elem]))
            .collect();
        *t = Tensor::param(t.shape().to_vec(), data).expect("shape preserved");
    });
    result?;
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint is missing parameters: {}",
            missing.join(", ")
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, Variant};

    #[test]
    fn model_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = preset(Variant::Micro);
        let model: DatModel<f32> = build_dat(&cfg, &RngStream::new(42)).unwrap();
        save_model(&model, &path).unwrap();
        let loaded: DatModel<f32> = load_model(&path).unwrap();

        let mut original = Vec::new();
        model.visit_tensors(&mut |name, _, t| original.push((name.to_string(), t.data().to_vec())));
        let mut restored = Vec::new();
        loaded.visit_tensors(&mut |name, _, t| restored.push((name.to_string(), t.data().to_vec())));
        assert_eq!(original.len(), restored.len());
        for ((n1, d1), (n2, d2)) in original.iter().zip(&restored) {
            assert_eq!(n1, n2);
            assert_eq!(
                d1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                d2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{n1} differs"
            );
        }

        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = preset(Variant::Micro);
        let model: DatModel<f32> = build_dat(&cfg, &RngStream::new(1)).unwrap();
        save_model(&model, &path).unwrap();
        assert!(load_model::<f64>(&path).is_err());
    }
}
