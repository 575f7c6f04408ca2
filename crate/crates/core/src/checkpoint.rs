//! Checkpoint persistence.
//!
//! File layout: magic `MUWARM1\0`, a little-endian u64 byte length, a UTF-8
//! JSON header (configs, ledger, seed, tensor directory with name / shape /
//! offset), then raw little-endian f32 tensor payloads in directory order.
//! Save -> load -> save round-trips byte-identically.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{tensor_specs, Model, ModelConfig};
use crate::param::{ParamTensor, Scheme};
use crate::train::{RunLedger, TrainConfig};

pub const MAGIC: &[u8; 8] = b"MUWARM1\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorDirEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    scheme: Scheme,
    train_config: TrainConfig,
    ledger: RunLedger,
    seed: u64,
    tensors: Vec<TensorDirEntry>,
}

/// A trained (or freshly initialized) model state plus its run ledger.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub scheme: Scheme,
    pub train_config: TrainConfig,
    pub ledger: RunLedger,
    pub seed: u64,
    /// Raw (pre-multiplier) tensors in spec order.
    pub params: Vec<ParamTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, tc: &TrainConfig, ledger: &RunLedger) -> Checkpoint {
        // store in spec order so payload layout is canonical
        let specs = tensor_specs(&model.cfg);
        let params = specs
            .iter()
            .map(|s| model.param(&s.name).expect("complete model").clone())
            .collect();
        Checkpoint {
            cfg: model.cfg,
            scheme: model.scheme,
            train_config: *tc,
            ledger: *ledger,
            seed: tc.seed,
            params,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(&self.cfg, &self.scheme, self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut dir = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for p in &self.params {
            dir.push(TensorDirEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
            });
            offset += (p.len() * 4) as u64;
        }
        let header = Header {
            model_config: self.cfg,
            scheme: self.scheme,
            train_config: self.train_config,
            ledger: self.ledger,
            seed: self.seed,
            tensors: dir,
        };
        let header_json = serde_json::to_string(&header)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(header_json.len() as u64).to_le_bytes())?;
            f.write_all(header_json.as_bytes())?;
            for p in &self.params {
                for &w in &p.data {
                    f.write_all(&w.to_le_bytes())?;
                }
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Input(format!(
                "bad checkpoint magic {magic:?} in {}",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_buf = vec![0u8; header_len];
        f.read_exact(&mut header_buf)?;
        let header: Header = serde_json::from_slice(&header_buf)?;
        let specs = tensor_specs(&header.model_config);
        let mut params = Vec::with_capacity(header.tensors.len());
        let mut expect_offset = 0u64;
        for entry in &header.tensors {
            if entry.offset != expect_offset {
                return Err(Error::Input(format!(
                    "tensor {} at offset {} but payload cursor is {expect_offset}",
                    entry.name, entry.offset
                )));
            }
            let count: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; count * 4];
            f.read_exact(&mut buf)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let spec = specs
                .iter()
                .find(|s| s.name == entry.name)
                .ok_or_else(|| Error::Input(format!("unknown tensor {} in checkpoint", entry.name)))?;
            params.push(ParamTensor {
                name: entry.name.clone(),
                role: spec.role,
                shape: entry.shape.clone(),
                data,
            });
            expect_offset += (count * 4) as u64;
        }
        Ok(Checkpoint {
            cfg: header.model_config,
            scheme: header.scheme,
            train_config: header.train_config,
            ledger: header.ledger,
            seed: header.seed,
            params,
        })
    }
}
