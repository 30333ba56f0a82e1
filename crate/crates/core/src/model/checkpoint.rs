//! Single-file tensor container: `"STARCKP1"`, a little-endian `u64` manifest
//! length, the JSON manifest, then the raw little-endian `f32` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{hex, param_specs, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STARCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_len: u64,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Full resolved run configuration.
    pub config: serde_json::Value,
    /// Free-form extra state.
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.tensors.iter().map(|(_, t)| t.len() * 4).sum());
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            step: self.step,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
            payload_len: payload.len() as u64,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.to_string() };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing STARCKP1 header"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(Error::Checksum { path: path.to_path_buf() });
        }
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..16 + mlen]).map_err(|e| bad(&format!("manifest: {e}")))?;
        let payload = &bytes[16 + mlen..];
        if payload.len() as u64 != manifest.payload_len || hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(Error::Checksum { path: path.to_path_buf() });
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(&format!("unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(bad(&format!("tensor {} overruns the payload", e.name)));
            }
            let data = payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Checkpoint { step: manifest.step, config: manifest.config, meta: manifest.meta, tensors })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Appends `params` under `prefix` (e.g. `"teacher/"`).
    pub fn push_params(&mut self, prefix: &str, config: &ModelConfig, params: &ModelParams<f32>) {
        for (s, t) in param_specs(config).into_iter().zip(&params.tensors) {
            self.tensors.push((format!("{prefix}{}", s.name), t.clone()));
        }
    }

    /// Reads the model stored under `prefix`, checking every shape.
    pub fn params(&self, prefix: &str, config: &ModelConfig) -> Result<ModelParams<f32>> {
        let tensors = param_specs(config)
            .into_iter()
            .map(|s| {
                let name = format!("{prefix}{}", s.name);
                let t = self.get(&name).ok_or_else(|| Error::ConfigMismatch {
                    field: name.clone(),
                    expected: format!("{:?}", s.shape),
                    found: "missing".into(),
                })?;
                if t.shape() != s.shape {
                    return Err(Error::ConfigMismatch {
                        field: name,
                        expected: format!("{:?}", s.shape),
                        found: format!("{:?}", t.shape()),
                    });
                }
                Ok(t.clone())
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let c = ModelConfig::micro();
        let p = ModelParams::<f32>::init(&c, 1).unwrap();
        let mut ck = Checkpoint {
            step: 7,
            config: serde_json::to_value(&c).unwrap(),
            meta: serde_json::json!({"note": "x"}),
            tensors: Vec::new(),
        };
        ck.push_params("", &c, &p);
        ck.push_params("teacher/", &c, &p);
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let p2 = dir.path().join("b.ckpt");
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&p2).unwrap());
        let c = ModelConfig::micro();
        assert_eq!(back.params("teacher/", &c).unwrap(), ModelParams::init(&c, 1).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let ck = sample();
        let mut bytes = ck.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("c")), Err(Error::Checksum { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..n - 8], Path::new("c")), Err(Error::Checksum { .. })));
    }

    #[test]
    fn wrong_config_names_the_tensor() {
        let ck = sample();
        let mut c = ModelConfig::micro();
        c.vocab = 20;
        match ck.params("", &c) {
            Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "tok_embed"),
            other => panic!("{other:?}"),
        }
    }
}
