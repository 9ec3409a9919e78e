use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{AdamWState, RngState, Tensor};
use crate::transformer::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"EXPE";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train: TrainConfig,
    /// One state per parameter, in parameter order; empty before the first step.
    pub optimizer: Vec<AdamWState<f32>>,
    pub step: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: usize,
    rng: RngState,
    optimizer_steps: Option<u64>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

impl Checkpoint {
    /// Serialises to the on-disk layout: magic, little-endian u32 version,
    /// u64 header length, JSON header, then f32 payloads in manifest order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<(String, Vec<usize>, &[f32])> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data()))
            .collect();
        if !self.optimizer.is_empty() {
            if self.optimizer.len() != self.model.params().len() {
                return Err(Error::Contract("optimizer state count differs from parameter count".into()));
            }
            for (p, st) in self.model.params().iter().zip(&self.optimizer) {
                blobs.push((format!("adam.m.{}", p.name), p.tensor.shape().to_vec(), &st.m));
                blobs.push((format!("adam.v.{}", p.name), p.tensor.shape().to_vec(), &st.v));
            }
        }
        let mut offset = 0;
        let tensors = blobs
            .iter()
            .map(|(name, shape, data)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += data.len() * 4;
                e
            })
            .collect();
        let header = Header {
            model_config: self.model.config().clone(),
            train_config: self.train.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optimizer_steps: self.optimizer.first().map(|s| s.t),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &blobs {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Corrupt(format!("file is {} bytes, shorter than the preamble", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(Error::Corrupt(format!("header needs {hlen} bytes, file has {}", body.len())));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
        let payload = &body[hlen..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        if payload.len() != expected {
            return Err(Error::Corrupt(format!(
                "payload is {} bytes, manifest describes {expected}",
                payload.len()
            )));
        }
        let read = |e: &ManifestEntry| -> Result<Tensor<f32>> {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + n * 4)
                .ok_or_else(|| Error::Corrupt(format!("tensor `{}` lies outside the payload", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::new(e.shape.clone(), data).map_err(|_| Error::Corrupt(format!("tensor `{}` has an empty shape", e.name)))
        };
        let mut params = Vec::new();
        let mut moments = std::collections::HashMap::new();
        for e in &header.tensors {
            let t = read(e)?;
            if e.name.starts_with("adam.") {
                moments.insert(e.name.clone(), t.into_data());
            } else {
                params.push((e.name.clone(), t));
            }
        }
        let model = Model::from_params(header.model_config, params)?;
        let optimizer = match header.optimizer_steps {
            None => Vec::new(),
            Some(t) => model
                .params()
                .iter()
                .map(|p| {
                    let mut take = |kind: &str| {
                        moments
                            .remove(&format!("adam.{kind}.{}", p.name))
                            .ok_or_else(|| Error::Corrupt(format!("missing optimizer state for `{}`", p.name)))
                    };
                    Ok(AdamWState {
                        m: take("m")?,
                        v: take("v")?,
                        t,
                    })
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            model,
            train: header.train_config,
            optimizer,
            step: header.step,
            rng: header.rng,
        })
    }

    /// Copies the stored weights into `model`, which must have the same
    /// parameter names and shapes.
    pub fn load_into(&self, model: &mut Model<f32>) -> Result<()> {
        for src in self.model.params() {
            let dst = model
                .param_mut(&src.name)
                .ok_or_else(|| Error::Corrupt(format!("model has no tensor `{}`", src.name)))?;
            if dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::TensorShape {
                    name: src.name.clone(),
                    expected: dst.tensor.shape().to_vec(),
                    found: src.tensor.shape().to_vec(),
                });
            }
        }
        for src in self.model.params() {
            let dst = model.param_mut(&src.name).expect("checked above");
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
