//! Binary checkpoint format.
//!
//! Layout: `JDBPCKPT`, format version (u32 LE), manifest length (u64 LE),
//! manifest JSON, every tensor as raw f64 LE in manifest order, then the
//! sha256 of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, RtgVariant};

pub const MAGIC: &[u8; 8] = b"JDBPCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Dpo,
}

/// Everything besides the weights needed to run the model as a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub rtg: RtgVariant,
    /// Divisor applied to bidding returns before they enter the model.
    pub rtg_scale: f64,
    /// Largest episode bidding return in the training data.
    pub max_episode_return: f64,
    pub best_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            model: self.model.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .model
                .names
                .iter()
                .zip(&self.model.tensors)
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.num_parameters() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.model.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a checkpoint. With `expected`, tensor shapes are checked
    /// against that config instead of the stored one.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body
            .get(20..20 + len)
            .ok_or_else(|| Error::Checkpoint("manifest extends past end of file".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let mut data = &body[20 + len..];
        let mut named = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let n = entry.rows * entry.cols;
            if data.len() < 8 * n {
                return Err(Error::Checkpoint(format!("tensor `{}` truncated", entry.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[8 * n..];
            named.push((entry.name, Mat::from_vec(entry.rows, entry.cols, values)));
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        let config = expected.cloned().unwrap_or(manifest.model);
        let model = Model::from_tensors(config, named)?;
        Ok(Self {
            model,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            embed_dim: 16,
            ..Default::default()
        };
        Checkpoint {
            model: Model::new(cfg, 0).unwrap().randomized(4, 1.0),
            meta: CheckpointMeta {
                stage: Stage::Stage1,
                rtg: RtgVariant::Memoryless,
                rtg_scale: 12.5,
                max_episode_return: 12.5,
                best_loss: Some(0.1 + 0.2),
                seed: 9,
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, None).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_fails_checksum() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 100], None).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let k = bytes.len() / 2;
        bytes[k] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes, None).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(Checkpoint::from_bytes(&bytes, None).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn wrong_width_is_a_shape_mismatch() {
        let c = Checkpoint {
            model: Model::new(ModelConfig::default(), 0).unwrap(),
            meta: sample().meta,
        };
        let narrow = ModelConfig {
            embed_dim: 32,
            ..Default::default()
        };
        let err = Checkpoint::from_bytes(&c.to_bytes(), Some(&narrow)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }
}
