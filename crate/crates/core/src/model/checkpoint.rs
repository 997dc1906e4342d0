use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LoraAdapter, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const FORMAT: &str = "dplora-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    requires_grad: bool,
    /// Little-endian f64 bytes, base64.
    data: String,
}

/// On-disk layout of a model checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    pub tag: String,
    pub content_hash: String,
    pub config: ModelConfig,
    pub lineage: Vec<String>,
    adapters: Vec<LoraAdapter>,
    tensors: Vec<StoredTensor>,
}

fn encode_f64(data: &[f64]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_f64(name: &str, text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Serde(format!("tensor {name}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Serde(format!("tensor {name}: truncated data")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn from_model(model: &ModelParams, tag: &str) -> Result<Self> {
        let tensors: Vec<StoredTensor> = model
            .params
            .iter()
            .map(|(name, t)| StoredTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                requires_grad: t.requires_grad(),
                data: encode_f64(t.data()),
            })
            .collect();
        let mut ck = Checkpoint {
            format: FORMAT.to_string(),
            tag: tag.to_string(),
            content_hash: String::new(),
            config: model.config.clone(),
            lineage: model.lineage.clone(),
            adapters: model.adapters.clone(),
            tensors,
        };
        ck.content_hash = ck.compute_hash()?;
        Ok(ck)
    }

    /// SHA-256 over config, adapters and tensors. Tag and lineage are
    /// excluded so identical weights hash identically.
    fn compute_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        h.update(serde_json::to_vec(&self.adapters)?);
        for t in &self.tensors {
            h.update(serde_json::to_vec(&(&t.name, &t.shape, t.requires_grad))?);
            h.update(t.data.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn into_model(self) -> Result<ModelParams> {
        if self.format != FORMAT {
            return Err(Error::Serde(format!(
                "unsupported checkpoint format {:?}",
                self.format
            )));
        }
        if self.compute_hash()? != self.content_hash {
            return Err(Error::Serde("checkpoint content hash mismatch".into()));
        }
        self.config.validate()?;
        let mut params = ParamSet::new();
        for t in self.tensors {
            let data = decode_f64(&t.name, &t.data)?;
            let tensor = Tensor::new(t.shape, data)?.with_requires_grad(t.requires_grad);
            params.insert(t.name, tensor)?;
        }
        let model = ModelParams {
            config: self.config,
            params,
            adapters: self.adapters,
            lineage: self.lineage,
        };
        for a in &model.adapters {
            for name in [a.target.clone(), a.a_name(), a.b_name()] {
                model.tensor(&name)?;
            }
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &ModelParams, tag: &str, path: &Path) -> Result<String> {
    let ck = Checkpoint::from_model(model, tag)?;
    let json = serde_json::to_string(&ck)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(ck.content_hash)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.into_model()
}

#[cfg(test)]
mod tests {
    use super::super::LoraTargets;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            vocab_size: 10,
            max_seq_len: 4,
            d_model: 4,
            n_heads: 1,
            n_layers: 1,
            d_ff: 4,
            n_labels: 2,
            dropout_rate: 0.0,
        };
        let mut m = ModelParams::init(cfg, 9).unwrap();
        let targets = LoraTargets::Attention.weight_names(&m.config);
        m.attach_lora(&targets, 2, 0.5, true, 1).unwrap();
        m.params.get_mut("head.bias").unwrap().data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let hash = save_checkpoint(&m, "t", &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(Checkpoint::from_model(&back, "other").unwrap().content_hash, hash);
    }

    #[test]
    fn tampering_is_detected() {
        let cfg = ModelConfig {
            vocab_size: 6,
            max_seq_len: 2,
            d_model: 2,
            n_heads: 1,
            n_layers: 1,
            d_ff: 2,
            n_labels: 1,
            dropout_rate: 0.0,
        };
        let m = ModelParams::init(cfg, 1).unwrap();
        let mut ck = Checkpoint::from_model(&m, "x").unwrap();
        ck.tensors[0].data = encode_f64(&vec![1.0; 12]);
        assert!(ck.into_model().is_err());
    }
}
