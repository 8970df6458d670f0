//! Binary checkpoint: `DMSCKPT1`, a little-endian u64 metadata length, JSON
//! metadata, then little-endian f32 parameters followed by the momentum
//! buffers in the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::backbone::DeMoSeg;
use crate::diffops::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DMSCKPT1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    /// Epochs completed.
    pub epoch: usize,
    /// Iterations completed.
    pub iteration: usize,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub model: DeMoSeg<f32>,
    pub momentum: Vec<Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    iteration: usize,
    config_hash: String,
    config: TrainConfig,
    rng_seed: String,
    rng_word_pos: String,
    params: Vec<ParamMeta>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.model.params();
        let meta = Meta {
            epoch: self.epoch,
            iteration: self.iteration,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            rng_seed: hex(&self.rng_seed),
            rng_word_pos: self.rng_word_pos.to_string(),
            params: params
                .names()
                .iter()
                .zip(params.values())
                .map(|(n, v)| ParamMeta {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * params.count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in params.values().iter().chain(&self.momentum) {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let err = |d: &str| Error::Format {
            path: path.to_path_buf(),
            detail: d.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| err("truncated metadata"))?;
        let meta: Meta = serde_json::from_slice(json).map_err(|e| err(&e.to_string()))?;
        let mut model = DeMoSeg::<f32>::new(meta.config.network.clone(), meta.config.seed)?;
        let names_match = model.params().names().len() == meta.params.len()
            && model
                .params()
                .names()
                .iter()
                .zip(model.params().values())
                .zip(&meta.params)
                .all(|((n, v), m)| *n == m.name && v.shape() == m.shape.as_slice());
        if !names_match {
            return Err(err("parameter layout does not match the stored network config"));
        }
        let mut floats = bytes[16 + len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let total = model.params().count();
        if bytes.len() - 16 - len != 8 * total {
            return Err(err(&format!(
                "payload holds {} bytes, expected {}",
                bytes.len() - 16 - len,
                8 * total
            )));
        }
        for t in model.params_mut().values_mut() {
            for v in t.data_mut() {
                *v = floats.next().expect("length checked");
            }
        }
        let momentum = model
            .params()
            .values()
            .iter()
            .map(|t| Tensor::from_vec(t.shape(), floats.by_ref().take(t.numel()).collect()))
            .collect();
        Ok(Self {
            config_hash: meta.config_hash,
            config: meta.config,
            epoch: meta.epoch,
            iteration: meta.iteration,
            rng_seed: unhex(&meta.rng_seed).ok_or_else(|| err("bad rng seed"))?,
            rng_word_pos: meta.rng_word_pos.parse().map_err(|_| err("bad rng position"))?,
            model,
            momentum,
        })
    }
}
