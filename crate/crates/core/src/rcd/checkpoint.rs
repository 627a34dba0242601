//! Parameter checkpoints: a JSON manifest plus one raw little-endian float32
//! blob per named parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub n_samples: usize,
    pub nominal_width: f64,
    pub gate_scale: f64,
    pub params: Vec<ManifestEntry>,
}

/// Write `entries` under `dir`: one `<name>.bin` blob each plus the manifest.
pub fn save_params(
    dir: &Path,
    entries: &[(String, &Tensor)],
    n_samples: usize,
    nominal_width: f64,
    gate_scale: f64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(0, e))?;
    let manifest = Manifest {
        schema_version: 1,
        n_samples,
        nominal_width,
        gate_scale,
        params: entries
            .iter()
            .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {}", e)))?;
    std::fs::write(dir.join(MANIFEST_NAME), json).map_err(|e| Error::io(0, e))?;
    for (name, tensor) in entries {
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(dir.join(format!("{}.bin", name)), bytes).map_err(|e| Error::io(0, e))?;
    }
    Ok(())
}

/// Load a checkpoint directory back into named tensors, manifest order.
pub fn load_params(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME)).map_err(|e| Error::io(0, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest decode: {}", e)))?;
    if manifest.schema_version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint schema version {}",
            manifest.schema_version
        )));
    }
    let mut out = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let bytes = std::fs::read(dir.join(format!("{}.bin", entry.name))).map_err(|e| Error::io(0, e))?;
        let expected: usize = entry.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(Error::Format(format!(
                "blob {} has {} bytes, expected {}",
                entry.name,
                bytes.len(),
                expected * 4
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        out.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        save_params(
            dir.path(),
            &[("stem.pattern".into(), &a), ("stem.log_nominal_width".into(), &b)],
            64,
            1.5,
            0.9,
        )
        .unwrap();
        let (manifest, params) = load_params(dir.path()).unwrap();
        assert_eq!(manifest.n_samples, 64);
        assert!((manifest.nominal_width - 1.5).abs() < 1e-12);
        assert_eq!(params.len(), 2);
        assert_eq!(params[0].0, "stem.pattern");
        assert_eq!(params[0].1.shape(), &[2, 3]);
        for (x, y) in params[0].1.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let dir = tempdir().unwrap();
        let a = Tensor::zeros(&[1]);
        save_params(dir.path(), &[("p".into(), &a)], 4, 1.0, 1.0).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(load_params(dir.path()).is_err());
    }
}
