//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic, a little-endian `u64` header length, a JSON
//! header, then every tensor as raw little-endian `f64` in header order.
//! Values are stored bit for bit, so a save/load cycle is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{MmdKernel, STRIDE};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"MFORGE\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

/// Trained parameters with the configuration and selection metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub epoch: usize,
    pub best_val_f1: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    channels: usize,
    stride: usize,
    mmd_kernel: MmdKernel,
    lambda_mmd: f64,
    epoch: usize,
    best_val_f1: f64,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            channels: self.model.config.channels,
            stride: STRIDE,
            mmd_kernel: self.model.config.mmd_kernel,
            lambda_mmd: self.config.lambda_mmd,
            epoch: self.epoch,
            best_val_f1: self.best_val_f1,
            config: TrainConfig { model: self.model.config.clone(), ..self.config.clone() },
            tensors: self
                .model
                .params
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.model.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        if header.stride != STRIDE {
            return Err(Error::Checkpoint(format!("stride {} differs from the built-in {STRIDE}", header.stride)));
        }
        let mut data = &body[hlen..];
        let mut params = ParamStore::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values));
            data = &data[8 * n..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let model = Model { config: header.config.model.clone(), params };
        model.check_params()?;
        Ok(Self { model, config: header.config, epoch: header.epoch, best_val_f1: header.best_val_f1 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            learning_rate: 0.1 + 0.2,
            lambda_mmd: 1.0 / 3.0,
            model: ModelConfig { channels: 8, decoder_hidden: 6, ..ModelConfig::default() },
            ..TrainConfig::default()
        };
        let mut model = Model::init(config.model.clone(), 3).unwrap();
        model.params.get_mut("cslab.pos_bias").unwrap().data_mut().copy_from_slice(&[f64::MIN_POSITIVE, -0.0]);
        Checkpoint { model, config, epoch: 7, best_val_f1: 0.1 + 0.7 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.best_val_f1.to_bits(), ck.best_val_f1.to_bits());
        assert_eq!(back.config, ck.config);
        assert_eq!(back.epoch, 7);
        for ((na, a), (nb, b)) in ck.model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
