//! Parameter checkpoints: a flat binary blob of little-endian f64 values
//! plus a JSON sidecar manifest mapping names to shapes and offsets.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("blob holds {got} values but the manifest describes {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values (not bytes).
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Write `params` as `<stem>.bin` + `<stem>.manifest.json`.
pub fn save_params(stem: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::with_capacity(params.total_values() * 8);
    let mut offset = 0usize;
    for (name, tensor) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.numel();
    }
    fs::File::create(stem.with_extension("bin"))?.write_all(&blob)?;
    let manifest = Manifest { entries };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(stem.with_extension("manifest.json"), json)?;
    Ok(())
}

/// Read a checkpoint written by [`save_params`].
pub fn load_params(stem: &Path) -> Result<ParamSet, CheckpointError> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(stem.with_extension("manifest.json"))?)?;
    let mut blob = Vec::new();
    fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut blob)?;
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let want: usize = manifest.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if values.len() != want {
        return Err(CheckpointError::LengthMismatch { got: values.len(), want });
    }
    let mut params = ParamSet::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let data = values[e.offset..e.offset + n].to_vec();
        params.insert(&e.name, Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        params.insert("layer.w", Tensor::randn(3, 5, 1.0, &mut rng)).unwrap();
        params.insert("layer.b", Tensor::randn(1, 5, 1.0, &mut rng)).unwrap();
        params.insert("head.w", Tensor::randn(5, 2, 0.3, &mut rng)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        save_params(&stem, &params).unwrap();
        let loaded = load_params(&stem).unwrap();

        assert_eq!(loaded.len(), params.len());
        for (name, tensor) in params.iter() {
            assert_eq!(loaded.get(name).unwrap(), tensor, "{name}");
        }
        // Order preserved too.
        let a: Vec<_> = params.names().collect();
        let b: Vec<_> = loaded.names().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        save_params(&stem, &params).unwrap();
        let blob_path = stem.with_extension("bin");
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..16]).unwrap();
        assert!(matches!(load_params(&stem), Err(CheckpointError::LengthMismatch { .. })));
    }
}
