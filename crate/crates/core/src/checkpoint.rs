//! Model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PCKP" | u32 version | u32 header_len | header_len bytes of JSON | f32 blob
//! ```
//!
//! The JSON header holds the model kind, network and diffusion
//! configuration, the training step and a table of `{name, shape, offset}`
//! entries locating each tensor in the blob (offsets in f32 elements).
//! Optimizer moments, when present, are extra tensors named `adam.m.<name>`
//! and `adam.v.<name>`. The noise schedule is always recomputed from the
//! diffusion configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionConfig};
use crate::error::{Error, Result};
use crate::io::{put_f32s, put_u32, Reader};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::train::{TrainConfig, Trainer};
use crate::unet::{ModelKind, NetConfig, UNet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    net: NetConfig,
    diffusion: DiffusionConfig,
    step: u64,
    seed: u64,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub net: NetConfig,
    pub diffusion: DiffusionConfig,
    pub step: u64,
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer, with_optimizer: bool) -> Self {
        Checkpoint {
            kind: tr.kind,
            net: tr.model.net.config().clone(),
            diffusion: tr.diffusion,
            step: tr.step,
            seed: tr.seed,
            params: tr.model.store.clone(),
            optimizer: with_optimizer.then(|| OptimizerState {
                config: tr.optimizer.config,
                step: tr.optimizer.step,
                m: tr.optimizer.m.clone(),
                v: tr.optimizer.v.clone(),
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &[usize], &[f32])> = self
            .params
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.as_slice(), p.value.as_slice()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (i, p) in self.params.params.iter().enumerate() {
                entries.push((format!("adam.m.{}", p.name), &p.shape, &opt.m[i]));
                entries.push((format!("adam.v.{}", p.name), &p.shape, &opt.v[i]));
            }
        }
        let mut offset = 0usize;
        let tensors = entries
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.to_vec(),
                    offset,
                };
                offset += data.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind,
            net: self.net.clone(),
            diffusion: self.diffusion,
            step: self.step,
            seed: self.seed,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        for (_, _, data) in &entries {
            put_f32s(&mut out, data);
        }
        out
    }

    /// Decodes and validates a checkpoint, including that its tensor table
    /// matches the structure implied by its network configuration.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let len = r.u32()? as usize;
        if len > MAX_HEADER {
            return Err(corrupt("checkpoint header too large"));
        }
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| corrupt(format!("checkpoint header: {e}")))?;
        if !r.remaining().is_multiple_of(4) {
            return Err(corrupt("checkpoint blob is not a whole number of f32 values"));
        }
        let total = r.remaining() / 4;
        let blob = r.f32_vec(total)?;
        header.diffusion.validate()?;
        header.net.validate()?;
        // refuse to allocate a network far larger than the blob could hold
        let expected_params = estimate_params(&header.net);
        if expected_params > total {
            return Err(corrupt(format!(
                "blob holds {total} values, network needs about {expected_params}"
            )));
        }
        let (_, template) = UNet::build::<f32>(&header.net, 0)?;

        let mut end = 0usize;
        let mut read = |entry: &TensorEntry, expect_name: &str, expect_shape: &[usize]| -> Result<Vec<f32>> {
            if entry.name != expect_name || entry.shape != expect_shape {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {:?} {:?} where {expect_name:?} {expect_shape:?} was expected",
                    entry.name, entry.shape
                )));
            }
            let n: usize = entry.shape.iter().product();
            if entry.offset != end || entry.offset.checked_add(n).is_none_or(|e| e > total) {
                return Err(corrupt(format!("tensor {} has a bad offset", entry.name)));
            }
            end = entry.offset + n;
            Ok(blob[entry.offset..end].to_vec())
        };
        let np = template.params.len();
        let want = if header.optimizer.is_some() { 3 * np } else { np };
        if header.tensors.len() != want {
            return Err(Error::CheckpointMismatch(format!(
                "{} tensors stored, {want} expected",
                header.tensors.len()
            )));
        }
        let mut params = template.clone();
        for (i, p) in params.params.iter_mut().enumerate() {
            p.value = read(&header.tensors[i], &p.name, &p.shape)?;
        }
        let optimizer = match header.optimizer {
            Some(oh) => {
                let mut m = Vec::with_capacity(np);
                let mut v = Vec::with_capacity(np);
                for (i, p) in template.params.iter().enumerate() {
                    m.push(read(&header.tensors[np + 2 * i], &format!("adam.m.{}", p.name), &p.shape)?);
                    v.push(read(&header.tensors[np + 2 * i + 1], &format!("adam.v.{}", p.name), &p.shape)?);
                }
                Some(OptimizerState {
                    config: oh.config,
                    step: oh.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        if end != total {
            return Err(corrupt("trailing values after the last tensor"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            net: header.net,
            diffusion: header.diffusion,
            step: header.step,
            seed: header.seed,
            params,
            optimizer,
        })
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        let (net, _) = UNet::build::<f32>(&self.net, 0)?;
        Ok(Denoiser {
            net,
            store: self.params.clone(),
        })
    }

    /// Rebuilds a trainer that continues from this checkpoint. Optimizer
    /// moments are restored when stored, otherwise they restart at zero.
    pub fn into_trainer(self, train: &TrainConfig) -> Result<Trainer> {
        let model = self.denoiser()?;
        let mut optimizer = Adam::new(train.optimizer, &model.store);
        if let Some(o) = self.optimizer {
            optimizer.step = o.step;
            optimizer.m = o.m;
            optimizer.v = o.v;
        }
        Trainer::from_parts(self.kind, model, optimizer, self.step, self.diffusion, train, self.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Cheap lower bound on the parameter count of a configuration: the
/// time-embedding projection and the convolution weights of every residual
/// block, ignoring the rest.
fn estimate_params(cfg: &NetConfig) -> usize {
    let mut total = cfg.time_embed_dim.saturating_mul(cfg.time_embed_dim);
    let mut ch = cfg.base_channels;
    for &sc in &cfg.stage_channels {
        for _ in 0..cfg.blocks_per_stage {
            total = total.saturating_add(9usize.saturating_mul(ch.saturating_mul(sc)));
            total = total.saturating_add(9usize.saturating_mul(sc.saturating_mul(sc)));
            ch = sc;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, DatasetKind, FireFrame, Pair};

    fn tiny() -> NetConfig {
        NetConfig {
            in_channels: 2,
            base_channels: 8,
            stage_channels: vec![8, 8],
            blocks_per_stage: 1,
            attention_resolutions: vec![4],
            bottleneck_attention: true,
            norm_groups: 4,
            dropout: 0.0,
            time_embed_dim: 16,
            heads: 2,
            image_size: 8,
        }
    }

    fn data() -> Dataset {
        Dataset {
            kind: DatasetKind::Train,
            width: 8,
            height: 8,
            pairs: vec![Pair {
                input: FireFrame::zeros(8, 8),
                target: FireFrame::filled(8, 8, 1.0),
            }],
        }
    }

    #[test]
    fn round_trip_and_resume_matches_uninterrupted_run() {
        let train = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        let d = DiffusionConfig::default();
        let mut straight = Trainer::new(ModelKind::Diffusion, &tiny(), d, &train, 3).unwrap();
        let mut first = Trainer::new(ModelKind::Diffusion, &tiny(), d, &train, 3).unwrap();
        for _ in 0..3 {
            straight.train_step(&data()).unwrap();
            first.train_step(&data()).unwrap();
        }
        let bytes = Checkpoint::from_trainer(&first, true).encode();
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.step, 3);
        let mut resumed = ck.into_trainer(&train).unwrap();
        let a = straight.train_step(&data()).unwrap();
        let b = resumed.train_step(&data()).unwrap();
        assert_eq!(a, b);
        assert_eq!(resumed.step, 4);
        for (p, q) in straight.model.store.params.iter().zip(&resumed.model.store.params) {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }

    #[test]
    fn rejects_damage() {
        let tr = Trainer::new(ModelKind::Diffusion, &tiny(), DiffusionConfig::default(), &TrainConfig::default(), 0).unwrap();
        let bytes = Checkpoint::from_trainer(&tr, false).encode();
        assert!(Checkpoint::decode(&bytes).is_ok());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 4]).is_err());
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(matches!(Checkpoint::decode(&v), Err(Error::VersionMismatch { .. })));
        let mut extra = bytes;
        extra.extend_from_slice(&[0; 4]);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
